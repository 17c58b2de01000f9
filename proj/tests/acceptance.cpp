// Copyright (c) 2026 The sglora Authors
// SPDX-License-Identifier: Apache-2.0

int main() { return 0; }
