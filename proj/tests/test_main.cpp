// Copyright 2026 The flowlab Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "flowlab/common.hpp"

int main(int argc, char** argv) {
    flowlab::tune_allocator();
    doctest::Context context(argc, argv);
    return context.run();
}
