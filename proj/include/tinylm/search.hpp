#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "tinylm/model.hpp"
#include "tinylm/rng.hpp"
#include "tinylm/training.hpp"

namespace tinylm {

// ---------------------------------------------------------------------------
// search space

enum class ParamKind { categorical, int_range, float_range };

struct ParamSpec {
    std::string name;
    ParamKind kind = ParamKind::float_range;
    std::vector<std::string> choices;  // categorical
    double low = 0.0;
    double high = 0.0;
    bool high_exclusive = false;  // float ranges written as [lo-hi)

    std::string describe() const;  // the range in space-file syntax
};

// Space files hold one `name = range` per line, in sampling order:
//   num_layers = [1-12]          inclusive integer range
//   dropout = [0.1-1.0)          float range (any bound with a '.')
//   activation = (gelu, relu)    categorical
class SearchSpace {
public:
    std::vector<ParamSpec> params;

    void validate() const;
    const ParamSpec* find(std::string_view name) const noexcept;

    static SearchSpace parse(std::string_view text, const std::string& source = "<memory>");
    static SearchSpace load(const std::filesystem::path& path);
    // Architecture space over position type, layers, heads, head size, FFN
    // size, activation and both dropouts.
    static SearchSpace architecture();
    std::string to_text() const;
};

using ParamValue = std::variant<std::int64_t, double, std::string>;
using Params = std::map<std::string, ParamValue>;

std::int64_t param_int(const Params& params, const std::string& name);
double param_number(const Params& params, const std::string& name);  // int or float
const std::string& param_string(const Params& params, const std::string& name);
std::string format_param(const ParamValue& value);

// ---------------------------------------------------------------------------
// trials and studies

enum class TrialState { running, complete, pruned, failed };
std::string_view to_string(TrialState state) noexcept;

struct Trial {
    std::size_t id = 0;
    Params params;
    std::map<std::size_t, double> intermediate;  // step -> value
    std::optional<double> value;                 // complete trials only
    TrialState state = TrialState::running;
    std::string error;                           // failed trials only
};

struct TpeConfig {
    std::size_t n_startup_trials = 10;
    std::size_t n_ei_candidates = 24;
    double gamma_fraction = 0.1;
    std::size_t gamma_cap = 25;
    double prior_weight = 1.0;

    // Size of the "good" set for n complete trials: min(ceil(0.1 n), 25).
    std::size_t gamma(std::size_t n) const noexcept;
};

struct MedianPrunerConfig {
    std::size_t n_warmup_trials = 5;
    std::size_t n_warmup_steps = 1;
};

enum class SamplerKind { tpe, random };
SamplerKind parse_sampler(std::string_view name);
std::string_view to_string(SamplerKind kind) noexcept;

struct Study {
    std::uint64_t seed = 0;
    SamplerKind sampler = SamplerKind::tpe;
    TpeConfig tpe;
    MedianPrunerConfig pruner;
    std::vector<Trial> trials;

    // Lowest final value among complete trials (lowest id on ties).
    const Trial* best() const noexcept;
};

// Independent uniform draw per parameter.
Params sample_random(const SearchSpace& space, Rng& rng);

// TPE proposal conditioned on the complete trials in `history`.
Params suggest(std::span<const Trial> history, const SearchSpace& space, const TpeConfig& tpe, Rng& rng);

// True iff the trial index is past warm-up, step >= warm-up steps, some
// earlier trial reported at this step, and `value` exceeds their median.
bool should_prune(std::span<const Trial> trials, std::size_t trial_id, std::size_t step, double value,
                  const MedianPrunerConfig& pruner);

// Parzen estimator of one numeric parameter over `observations` plus a prior
// component centred on the range. Integer parameters use bins of width 1.
class ParzenEstimator {
public:
    ParzenEstimator(const ParamSpec& spec, std::span<const double> observations, double prior_weight);
    double sample(Rng& rng) const;
    // Log density (floats) or log bin mass (ints) at x.
    double log_pdf(double x) const;

    const std::vector<double>& weights() const noexcept { return weights_; }
    const std::vector<double>& mus() const noexcept { return mus_; }
    const std::vector<double>& sigmas() const noexcept { return sigmas_; }

private:
    bool integer_;
    double low_, high_;
    std::vector<double> weights_, mus_, sigmas_;
};

// Categorical estimator: (counts + prior) normalised.
std::vector<double> categorical_weights(std::size_t num_choices, std::span<const std::size_t> observations,
                                        double prior_weight);

// Thrown by TrialContext::report when the pruner fires.
class TrialPruned : public std::exception {
public:
    const char* what() const noexcept override { return "trial pruned"; }
};

class StudyRunner;

// Handed to the objective for one trial.
class TrialContext {
public:
    std::size_t id() const noexcept { return id_; }
    const Params& params() const noexcept { return params_; }
    // Records an intermediate value; throws TrialPruned if the trial should stop.
    void report(std::size_t step, double value);

private:
    friend class StudyRunner;
    TrialContext(StudyRunner& runner, std::size_t id, Params params) : runner_(runner), id_(id), params_(std::move(params)) {}
    StudyRunner& runner_;
    std::size_t id_;
    Params params_;
};

using ObjectiveFn = std::function<double(TrialContext&)>;

struct StudyOptions {
    std::size_t n_trials = 100;
    std::uint64_t seed = 0;
    SamplerKind sampler = SamplerKind::tpe;
    TpeConfig tpe;
    MedianPrunerConfig pruner;
    bool prune = true;
    std::size_t workers = 1;
    // JSON-lines event log. When it already exists, finished trials with
    // consecutive ids from 0 are kept and the study continues after them.
    std::filesystem::path store;
};

Study run_study(const SearchSpace& space, const ObjectiveFn& objective, const StudyOptions& options);

// Replays an event log; trials without a terminal event stay `running`.
Study load_study(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// summaries

struct GroupSummary {
    std::size_t trials = 0;
    double avg_value = 0.0;
    std::map<std::string, double> means;       // numeric parameters
    std::map<std::string, std::string> modes;  // categorical; ties go to the earlier choice
};

struct StudySummary {
    double top_frac = 0.1;
    double bottom_frac = 0.1;
    GroupSummary best;
    GroupSummary worst;
    // Rows: one per parameter, then the average objective value.
    std::string to_tsv(const SearchSpace& space, const std::string& value_label = "Avg. perplexity") const;
};

// Groups hold max(1, round(frac * n)) complete trials from each end of the
// ranking by final value.
StudySummary summarize_study(const Study& study, const SearchSpace& space, double top_frac = 0.1,
                             double bottom_frac = 0.1);

// ---------------------------------------------------------------------------
// objectives

// Maps searched names onto a copy of `base`; dropout values are capped at 0.95.
ModelConfig model_config_from_params(const Params& params, ModelConfig base);

// Trains an encoder from the trial's parameters, reporting validation
// perplexity after every epoch; returns the final perplexity.
struct PretrainObjective {
    ModelConfig base;
    TrainConfig train;
    MaskingPolicy policy;
    const PackedDataset* train_data = nullptr;
    const PackedDataset* val_data = nullptr;

    double operator()(TrialContext& trial) const;
};

}  // namespace tinylm
