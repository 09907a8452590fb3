// SPDX-License-Identifier: Apache-2.0
#include "proxsae/cli.hpp"

int main(int argc, char** argv) { return proxsae::cli::dispatch(argc, argv); }
