#pragma once

#include <optional>
#include <string>
#include <vector>

namespace cozinb::cli {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

struct FitArgs {
    std::string config;
    std::vector<std::string> overrides;  // key=value
    std::optional<std::string> output;
    int threads = 0;  // 0: COZINB_THREADS, then 1
};

struct SampleArgs {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::string> output;
    std::optional<double> expect_mean_tml;
};

struct EvalArgs {
    std::string model_dir;
    std::optional<std::string> data;  // defaults to the data path of the run
    std::optional<std::string> output;  // defaults to <model_dir>/eval
    std::size_t top = 10;
    int threads = 0;
};

struct TransformArgs {
    std::string model_dir;
    std::string data;
    std::optional<std::string> output;  // defaults to <model_dir>/transform
    int threads = 0;
};

struct ExportArgs {
    std::string model_dir;
    std::string out;
    std::optional<std::string> format;  // tsv or json; from the extension otherwise
    std::size_t top = 10;
};

int cmd_fit(const FitArgs& a);
int cmd_sample(const SampleArgs& a);
int cmd_eval(const EvalArgs& a);
int cmd_transform(const TransformArgs& a);
int cmd_export_factors(const ExportArgs& a);

/// Parses argv and dispatches. Errors are reported on stderr.
int run(int argc, char** argv);

}  // namespace cozinb::cli
