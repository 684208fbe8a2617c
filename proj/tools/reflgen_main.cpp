// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "reflgen/cli.h"

int main(int argc, char** argv) { return reflgen::cli::run(argc, argv, std::cout, std::cerr); }
