// SPDX-License-Identifier: Apache-2.0

#include "c3de/cli.hpp"

int main(int argc, char** argv) { return c3de::cli::run(argc, argv); }
