#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

namespace deepwaste {

// Command line front end. Returns the process exit status: 0 on success, 1 on
// a runtime failure, 2 on a usage error (message and usage text on `err`).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// --model wins over DEEPWASTE_MODEL_DIR, which wins over the config file;
// "model" when none is given.
std::filesystem::path resolve_model_dir(const std::optional<std::string>& flag, const char* env,
                                        const std::optional<std::string>& config);

}  // namespace deepwaste
