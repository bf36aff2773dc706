// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"
#include "flow4d/runtime.hpp"

int main(int argc, char** argv) {
  flow4d::configure_allocator();
  return flow4d::cli::run(argc, argv);
}
