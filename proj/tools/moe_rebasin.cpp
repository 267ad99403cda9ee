// Copyright (c) 2026 moe-rebasin authors
// SPDX-License-Identifier: Apache-2.0
#include <cstdio>

int main() {
    std::puts("moe-rebasin: placeholder");
    return 0;
}
