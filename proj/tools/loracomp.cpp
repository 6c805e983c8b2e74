// SPDX-License-Identifier: Apache-2.0
#include "loracomp/cli.hpp"

int main(int argc, char** argv) { return loracomp::run_cli(argc, argv); }
