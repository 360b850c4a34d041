#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace mtst::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;  // contract, parse and configuration errors
inline constexpr int kExitIo = 2;

inline constexpr std::string_view kVerbs[] = {"mine",     "synth", "stats", "pretrain",
                                              "finetune", "eval",  "ablate", "gradcheck"};

bool is_verb(std::string_view word);

// args excludes the program name. Machine-readable results go to out, log
// lines and error messages to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main(int argc, char** argv);

}  // namespace mtst::cli
