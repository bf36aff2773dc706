// Copyright 2026 The flow4d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace flow4d {

/// Keeps large training buffers on the heap instead of returning them to the
/// kernel after every step. Call once at program start.
void configure_allocator();

}  // namespace flow4d
