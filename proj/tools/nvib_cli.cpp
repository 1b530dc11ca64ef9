// SPDX-License-Identifier: Apache-2.0
#include "nvib/cli.hpp"

int main(int argc, char** argv) { return nvib::run_cli(argc, argv); }
