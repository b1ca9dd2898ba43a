#pragma once

namespace kdxcli {

// Exit codes: 0 success, 2 configuration errors, 3 data/parse/io errors,
// 4 internal errors.
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitInternal = 4;

int run(int argc, char** argv);

}  // namespace kdxcli
