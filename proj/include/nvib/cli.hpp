// SPDX-License-Identifier: Apache-2.0
//
// Command-line wiring: one executable with subcommands for training,
// evaluation, segmentation scoring, robustness sweeps, probing, attention
// export and gradient certification.  Every subcommand is reproducible
// from (config file, seed); `--threads 1` additionally guarantees bitwise
// identical artifacts.
#pragma once

namespace nvib {

inline constexpr const char* kCodeVersion = "1.0.0";

// Parses argv and runs the selected subcommand.  Returns the process exit
// code: 0 on success, 1 on a usage error (bad flags, invalid config,
// missing input files), 2 on a runtime or numeric failure.  Each failure
// prints a one-line diagnostic to stderr.
int run_cli(int argc, const char* const* argv);

}  // namespace nvib
