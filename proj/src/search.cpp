#include "tinylm/search.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include <json.hpp>

#include "tinylm/error.hpp"
#include "tinylm/kvfile.hpp"

namespace tinylm {

// ---------------------------------------------------------------------------
// space

namespace {

std::string float_text(double v) {
    std::string s = format_double(v);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

double parse_bound(const std::string& text, const std::string& where) {
    double v = 0.0;
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v)) fail(ErrorKind::config, where + ": bad bound '" + text + "'");
    return v;
}

// Splits "lo-hi" or "lo, hi"; a '-' at the start or after an exponent is a sign.
std::pair<std::string, std::string> split_bounds(const std::string& inner, const std::string& where) {
    std::size_t cut = inner.find(',');
    if (cut == std::string::npos) {
        for (std::size_t i = 1; i < inner.size(); ++i) {
            const char prev = inner[i - 1];
            if (inner[i] == '-' && prev != 'e' && prev != 'E' && prev != '-' && prev != ' ') {
                cut = i;
                break;
            }
        }
        if (cut == std::string::npos) {
            // "lo - hi" with spaces
            for (std::size_t i = 1; i + 1 < inner.size(); ++i) {
                if (inner[i] == '-' && inner[i - 1] == ' ') {
                    cut = i;
                    break;
                }
            }
        }
    }
    if (cut == std::string::npos) fail(ErrorKind::config, where + ": expected a range like [1-12]");
    return {trim(inner.substr(0, cut)), trim(inner.substr(cut + 1))};
}

}  // namespace

std::string ParamSpec::describe() const {
    switch (kind) {
        case ParamKind::categorical: {
            std::string out = "(";
            for (std::size_t i = 0; i < choices.size(); ++i) out += (i ? ", " : "") + choices[i];
            return out + ")";
        }
        case ParamKind::int_range:
            return "[" + std::to_string(std::int64_t(low)) + "-" + std::to_string(std::int64_t(high)) + "]";
        case ParamKind::float_range:
            return "[" + float_text(low) + "-" + float_text(high) + (high_exclusive ? ")" : "]");
    }
    return {};
}

void SearchSpace::validate() const {
    if (params.empty()) fail(ErrorKind::config, "search space has no parameters");
    std::set<std::string> names;
    for (const auto& p : params) {
        if (p.name.empty()) fail(ErrorKind::config, "search parameter without a name");
        if (!names.insert(p.name).second) fail(ErrorKind::config, "search parameter '" + p.name + "' defined twice");
        if (p.kind == ParamKind::categorical) {
            if (p.choices.empty()) fail(ErrorKind::config, "categorical '" + p.name + "' has no choices");
            std::set<std::string> seen(p.choices.begin(), p.choices.end());
            if (seen.size() != p.choices.size()) fail(ErrorKind::config, "categorical '" + p.name + "' repeats a choice");
            continue;
        }
        if (!(p.low <= p.high) || (p.high_exclusive && !(p.low < p.high))) {
            fail(ErrorKind::config, "range of '" + p.name + "' is empty: " + p.describe());
        }
        if (p.kind == ParamKind::int_range && (p.low != std::floor(p.low) || p.high != std::floor(p.high))) {
            fail(ErrorKind::config, "integer range of '" + p.name + "' has fractional bounds");
        }
    }
}

const ParamSpec* SearchSpace::find(std::string_view name) const noexcept {
    for (const auto& p : params) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

SearchSpace SearchSpace::parse(std::string_view text, const std::string& source) {
    SearchSpace space;
    std::size_t line_no = 0;
    for (const auto& raw : split(text, '\n')) {
        ++line_no;
        std::string line = raw;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(line_no);
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(ErrorKind::config, where + ": expected 'name = range'");
        ParamSpec p;
        p.name = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (value.size() < 2) fail(ErrorKind::config, where + ": empty range for '" + p.name + "'");
        const char open = value.front(), close = value.back();
        const std::string inner = value.substr(1, value.size() - 2);
        if (open == '(' && close == ')') {
            p.kind = ParamKind::categorical;
            for (const auto& c : split(inner, ',')) {
                auto choice = trim(c);
                if (choice.empty()) fail(ErrorKind::config, where + ": empty choice");
                p.choices.push_back(choice);
            }
        } else if (open == '[' && (close == ']' || close == ')')) {
            auto [lo, hi] = split_bounds(inner, where);
            const bool is_float = (lo + hi).find_first_of(".eE") != std::string::npos;
            p.low = parse_bound(lo, where);
            p.high = parse_bound(hi, where);
            p.high_exclusive = close == ')';
            p.kind = is_float ? ParamKind::float_range : ParamKind::int_range;
            if (!is_float && p.high_exclusive) fail(ErrorKind::config, where + ": integer ranges are inclusive; use ]");
        } else {
            fail(ErrorKind::config, where + ": range must look like [lo-hi], [lo-hi) or (a, b, ...)");
        }
        space.params.push_back(std::move(p));
    }
    space.validate();
    return space;
}

SearchSpace SearchSpace::load(const std::filesystem::path& path) {
    return parse(read_file(path), path.string());
}

SearchSpace SearchSpace::architecture() {
    return parse(
        "pos_type = (relative_key, relative_key_query, absolute)\n"
        "num_layers = [1-12]\n"
        "num_heads = [1-18]\n"
        "head_size = [1-100]\n"
        "ffn_size = [1-3072]\n"
        "activation = (gelu_new, gelu, silu, relu)\n"
        "dropout = [0.1-1.0)\n"
        "attention_dropout = [0.1-1.0)\n",
        "<architecture>");
}

std::string SearchSpace::to_text() const {
    std::string out;
    for (const auto& p : params) out += p.name + " = " + p.describe() + "\n";
    return out;
}

std::int64_t param_int(const Params& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) fail(ErrorKind::config, "missing parameter '" + name + "'");
    if (auto* v = std::get_if<std::int64_t>(&it->second)) return *v;
    fail(ErrorKind::config, "parameter '" + name + "' is not an integer");
}

double param_number(const Params& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) fail(ErrorKind::config, "missing parameter '" + name + "'");
    if (auto* v = std::get_if<std::int64_t>(&it->second)) return double(*v);
    if (auto* v = std::get_if<double>(&it->second)) return *v;
    fail(ErrorKind::config, "parameter '" + name + "' is not numeric");
}

const std::string& param_string(const Params& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) fail(ErrorKind::config, "missing parameter '" + name + "'");
    if (auto* v = std::get_if<std::string>(&it->second)) return *v;
    fail(ErrorKind::config, "parameter '" + name + "' is not categorical");
}

std::string format_param(const ParamValue& value) {
    if (auto* v = std::get_if<std::int64_t>(&value)) return std::to_string(*v);
    if (auto* v = std::get_if<double>(&value)) return format_double(*v);
    return std::get<std::string>(value);
}

// ---------------------------------------------------------------------------
// sampling

std::string_view to_string(TrialState state) noexcept {
    switch (state) {
        case TrialState::running: return "running";
        case TrialState::complete: return "complete";
        case TrialState::pruned: return "pruned";
        case TrialState::failed: return "failed";
    }
    return "?";
}

SamplerKind parse_sampler(std::string_view name) {
    if (name == "tpe") return SamplerKind::tpe;
    if (name == "random") return SamplerKind::random;
    fail(ErrorKind::config, "unknown sampler '" + std::string(name) + "' (expected tpe or random)");
}

std::string_view to_string(SamplerKind kind) noexcept {
    return kind == SamplerKind::tpe ? "tpe" : "random";
}

std::size_t TpeConfig::gamma(std::size_t n) const noexcept {
    const auto g = static_cast<std::size_t>(std::ceil(gamma_fraction * double(n)));
    return std::min(g, gamma_cap);
}

const Trial* Study::best() const noexcept {
    const Trial* best = nullptr;
    for (const auto& t : trials) {
        if (t.state != TrialState::complete || !t.value) continue;
        if (!best || *t.value < *best->value) best = &t;
    }
    return best;
}

namespace {

double normal_cdf(double z) {
    return 0.5 * std::erfc(-z / std::sqrt(2.0));
}

double log_sum_exp(const std::vector<double>& xs) {
    double hi = -std::numeric_limits<double>::infinity();
    for (double x : xs) hi = std::max(hi, x);
    if (!std::isfinite(hi)) return hi;
    double s = 0.0;
    for (double x : xs) s += std::exp(x - hi);
    return hi + std::log(s);
}

ParamValue draw_uniform(const ParamSpec& p, Rng& rng) {
    switch (p.kind) {
        case ParamKind::categorical:
            return p.choices[std::size_t(rng.uniform_int(0, std::int64_t(p.choices.size()) - 1))];
        case ParamKind::int_range:
            return rng.uniform_int(std::int64_t(p.low), std::int64_t(p.high));
        case ParamKind::float_range: {
            double v = rng.uniform(p.low, p.high);
            if (!p.high_exclusive && v > p.high) v = p.high;
            return v;
        }
    }
    return std::int64_t(0);
}

std::int64_t round_half_up(double x, const ParamSpec& p) {
    const auto v = static_cast<std::int64_t>(std::floor(x + 0.5));
    return std::clamp(v, std::int64_t(p.low), std::int64_t(p.high));
}

std::size_t draw_index(const std::vector<double>& weights, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u < acc) return i;
    }
    return weights.size() - 1;
}

}  // namespace

Params sample_random(const SearchSpace& space, Rng& rng) {
    Params out;
    for (const auto& p : space.params) out[p.name] = draw_uniform(p, rng);
    return out;
}

ParzenEstimator::ParzenEstimator(const ParamSpec& spec, std::span<const double> observations, double prior_weight)
    : integer_(spec.kind == ParamKind::int_range),
      low_(integer_ ? spec.low - 0.5 : spec.low),
      high_(integer_ ? spec.high + 0.5 : spec.high) {
    const double range = high_ - low_;
    mus_.assign(observations.begin(), observations.end());
    weights_.assign(mus_.size(), 1.0);
    if (prior_weight > 0.0 || mus_.empty()) {
        mus_.push_back(0.5 * (low_ + high_));
        weights_.push_back(prior_weight > 0.0 ? prior_weight : 1.0);
    }
    const std::size_t n = mus_.size();
    const std::size_t prior_index = n - 1;
    const bool has_prior = n > observations.size();

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return mus_[a] < mus_[b]; });
    sigmas_.assign(n, range);
    const double min_sigma = range / double(std::min<std::size_t>(100, n));
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t i = order[r];
        const double left = r > 0 ? mus_[order[r - 1]] : low_;
        const double right = r + 1 < n ? mus_[order[r + 1]] : high_;
        double s = std::max(mus_[i] - left, right - mus_[i]);
        if (has_prior && i == prior_index) s = range;
        sigmas_[i] = std::clamp(s, min_sigma, range);
    }
    const double total = std::accumulate(weights_.begin(), weights_.end(), 0.0);
    for (auto& w : weights_) w /= total;
}

double ParzenEstimator::sample(Rng& rng) const {
    const std::size_t k = draw_index(weights_, rng);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const double x = rng.normal(mus_[k], sigmas_[k]);
        if (x >= low_ && x <= high_) return x;
    }
    return std::clamp(mus_[k], low_, high_);
}

double ParzenEstimator::log_pdf(double x) const {
    std::vector<double> terms(mus_.size());
    for (std::size_t i = 0; i < mus_.size(); ++i) {
        const double mu = mus_[i], s = sigmas_[i];
        const double z = normal_cdf((high_ - mu) / s) - normal_cdf((low_ - mu) / s);
        double p;
        if (integer_) {
            p = normal_cdf((x + 0.5 - mu) / s) - normal_cdf((x - 0.5 - mu) / s);
        } else {
            const double u = (x - mu) / s;
            p = std::exp(-0.5 * u * u) / (s * std::sqrt(2.0 * M_PI));
        }
        terms[i] = std::log(weights_[i]) + std::log(std::max(p, 1e-300)) - std::log(std::max(z, 1e-300));
    }
    return log_sum_exp(terms);
}

std::vector<double> categorical_weights(std::size_t num_choices, std::span<const std::size_t> observations,
                                        double prior_weight) {
    std::vector<double> counts(num_choices, prior_weight);
    for (auto c : observations) {
        if (c < num_choices) counts[c] += 1.0;
    }
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    for (auto& c : counts) c /= total;
    return counts;
}

Params suggest(std::span<const Trial> history, const SearchSpace& space, const TpeConfig& tpe, Rng& rng) {
    std::vector<const Trial*> done;
    for (const auto& t : history) {
        if (t.state == TrialState::complete && t.value && std::isfinite(*t.value)) done.push_back(&t);
    }
    if (done.size() < std::max<std::size_t>(tpe.n_startup_trials, 1)) return sample_random(space, rng);
    std::stable_sort(done.begin(), done.end(), [](const Trial* a, const Trial* b) {
        return *a->value != *b->value ? *a->value < *b->value : a->id < b->id;
    });
    const std::size_t n_good = std::max<std::size_t>(1, tpe.gamma(done.size()));
    const std::size_t candidates = std::max<std::size_t>(1, tpe.n_ei_candidates);

    Params out;
    for (const auto& p : space.params) {
        if (p.kind == ParamKind::categorical) {
            std::vector<std::size_t> good, bad;
            for (std::size_t r = 0; r < done.size(); ++r) {
                auto it = done[r]->params.find(p.name);
                if (it == done[r]->params.end() || !std::holds_alternative<std::string>(it->second)) continue;
                auto c = std::find(p.choices.begin(), p.choices.end(), std::get<std::string>(it->second));
                if (c == p.choices.end()) continue;
                (r < n_good ? good : bad).push_back(std::size_t(c - p.choices.begin()));
            }
            const auto l = categorical_weights(p.choices.size(), good, tpe.prior_weight);
            const auto g = categorical_weights(p.choices.size(), bad, tpe.prior_weight);
            std::size_t best = 0;
            double best_score = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < candidates; ++k) {
                const std::size_t c = draw_index(l, rng);
                const double score = std::log(l[c]) - std::log(g[c]);
                if (score > best_score) {
                    best_score = score;
                    best = c;
                }
            }
            out[p.name] = p.choices[best];
            continue;
        }
        std::vector<double> good, bad;
        for (std::size_t r = 0; r < done.size(); ++r) {
            auto it = done[r]->params.find(p.name);
            if (it == done[r]->params.end() || std::holds_alternative<std::string>(it->second)) continue;
            (r < n_good ? good : bad).push_back(param_number(done[r]->params, p.name));
        }
        const ParzenEstimator l(p, good, tpe.prior_weight);
        const ParzenEstimator g(p, bad, tpe.prior_weight);
        double best = 0.0;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < candidates; ++k) {
            double x = l.sample(rng);
            if (p.kind == ParamKind::int_range) x = double(round_half_up(x, p));
            const double score = l.log_pdf(x) - g.log_pdf(x);
            if (score > best_score) {
                best_score = score;
                best = x;
            }
        }
        if (p.kind == ParamKind::int_range) {
            out[p.name] = round_half_up(best, p);
        } else {
            if (p.high_exclusive && best >= p.high) best = std::nextafter(p.high, p.low);
            out[p.name] = std::clamp(best, p.low, p.high);
        }
    }
    return out;
}

bool should_prune(std::span<const Trial> trials, std::size_t trial_id, std::size_t step, double value,
                  const MedianPrunerConfig& pruner) {
    if (trial_id < pruner.n_warmup_trials || step < pruner.n_warmup_steps) return false;
    std::vector<double> prior;
    for (const auto& t : trials) {
        if (t.id >= trial_id) continue;
        auto it = t.intermediate.find(step);
        if (it != t.intermediate.end() && !std::isnan(it->second)) prior.push_back(it->second);
    }
    if (prior.empty()) return false;
    if (std::isnan(value)) return true;
    std::sort(prior.begin(), prior.end());
    const std::size_t n = prior.size();
    const double median = n % 2 ? prior[n / 2] : 0.5 * (prior[n / 2 - 1] + prior[n / 2]);
    return value > median;
}

// ---------------------------------------------------------------------------
// study store

namespace {

using Json = nlohmann::ordered_json;

Json params_json(const Params& params) {
    Json j = Json::object();
    for (const auto& [name, v] : params) {
        std::visit([&](const auto& x) { j[name] = x; }, v);
    }
    return j;
}

Params params_from_json(const Json& j) {
    Params out;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it->is_number_integer()) out[it.key()] = it->get<std::int64_t>();
        else if (it->is_number()) out[it.key()] = it->get<double>();
        else if (it->is_string()) out[it.key()] = it->get<std::string>();
        else fail(ErrorKind::data, "parameter '" + it.key() + "' has an unsupported type");
    }
    return out;
}

Json number_or_null(double v) {
    return std::isfinite(v) ? Json(v) : Json(nullptr);
}

std::string header_line(const Study& s) {
    Json j;
    j["event"] = "study";
    j["seed"] = s.seed;
    j["sampler"] = std::string(to_string(s.sampler));
    return j.dump();
}

std::string suggested_line(const Trial& t) {
    Json j;
    j["event"] = "suggested";
    j["trial"] = t.id;
    j["params"] = params_json(t.params);
    return j.dump();
}

std::string intermediate_line(std::size_t id, std::size_t step, double value) {
    Json j;
    j["event"] = "intermediate";
    j["trial"] = id;
    j["step"] = step;
    j["value"] = number_or_null(value);
    return j.dump();
}

std::string terminal_line(const Trial& t) {
    Json j;
    switch (t.state) {
        case TrialState::complete:
            j["event"] = "completed";
            j["trial"] = t.id;
            j["value"] = number_or_null(*t.value);
            break;
        case TrialState::pruned:
            j["event"] = "pruned";
            j["trial"] = t.id;
            j["step"] = t.intermediate.empty() ? 0 : t.intermediate.rbegin()->first;
            break;
        case TrialState::failed:
            j["event"] = "failed";
            j["trial"] = t.id;
            j["error"] = t.error;
            break;
        case TrialState::running:
            fail(ErrorKind::usage, "running trials have no terminal event");
    }
    return j.dump();
}

}  // namespace

Study load_study(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    const auto lines = split(text, '\n');
    Study study;
    std::size_t last = lines.size();
    while (last > 0 && trim(lines[last - 1]).empty()) --last;
    for (std::size_t i = 0; i < last; ++i) {
        const auto where = path.string() + ":" + std::to_string(i + 1);
        if (trim(lines[i]).empty()) continue;
        Json j;
        try {
            j = Json::parse(lines[i]);
        } catch (const nlohmann::json::exception& e) {
            if (i + 1 == last) break;  // torn final write
            fail(ErrorKind::data, where + ": " + e.what());
        }
        try {
            const std::string event = j.at("event").get<std::string>();
            if (event == "study") {
                study.seed = j.at("seed").get<std::uint64_t>();
                study.sampler = parse_sampler(j.at("sampler").get<std::string>());
                continue;
            }
            const auto id = j.at("trial").get<std::size_t>();
            if (event == "suggested") {
                if (id != study.trials.size()) fail(ErrorKind::data, where + ": trial ids must be dense and ordered");
                Trial t;
                t.id = id;
                t.params = params_from_json(j.at("params"));
                study.trials.push_back(std::move(t));
                continue;
            }
            if (id >= study.trials.size()) fail(ErrorKind::data, where + ": event for unknown trial " + std::to_string(id));
            Trial& t = study.trials[id];
            auto number = [](const Json& v) { return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>(); };
            if (event == "intermediate") {
                t.intermediate[j.at("step").get<std::size_t>()] = number(j.at("value"));
            } else if (event == "completed") {
                t.state = TrialState::complete;
                t.value = number(j.at("value"));
            } else if (event == "pruned") {
                t.state = TrialState::pruned;
            } else if (event == "failed") {
                t.state = TrialState::failed;
                t.error = j.value("error", "");
            } else {
                fail(ErrorKind::data, where + ": unknown event '" + event + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::data, where + ": " + e.what());
        }
    }
    return study;
}

// ---------------------------------------------------------------------------
// runner

class StudyRunner {
public:
    StudyRunner(const SearchSpace& space, const ObjectiveFn& objective, const StudyOptions& options)
        : space_(space), objective_(objective), options_(options) {
        study_.seed = options.seed;
        study_.sampler = options.sampler;
        study_.tpe = options.tpe;
        study_.pruner = options.pruner;
    }

    Study run() {
        space_.validate();
        if (options_.n_trials == 0) fail(ErrorKind::config, "n_trials must be at least 1");
        if (!objective_) fail(ErrorKind::usage, "no objective given");
        open_store();
        next_id_ = study_.trials.size();
        const std::size_t workers = std::max<std::size_t>(1, options_.workers);
        if (workers == 1) {
            work();
        } else {
            std::vector<std::thread> pool;
            std::vector<std::exception_ptr> errors(workers);
            for (std::size_t w = 0; w < workers; ++w) {
                pool.emplace_back([this, w, &errors] {
                    try {
                        work();
                    } catch (...) {
                        errors[w] = std::current_exception();
                    }
                });
            }
            for (auto& t : pool) t.join();
            for (auto& e : errors) {
                if (e) std::rethrow_exception(e);
            }
        }
        return study_;
    }

    void report(std::size_t id, std::size_t step, double value) {
        bool prune = false;
        {
            std::lock_guard lock(mutex_);
            study_.trials[id].intermediate[step] = value;
            append(intermediate_line(id, step, value));
            prune = options_.prune && should_prune(study_.trials, id, step, value, options_.pruner);
        }
        if (prune) throw TrialPruned();
    }

private:
    void open_store() {
        if (options_.store.empty()) return;
        std::error_code ec;
        if (std::filesystem::exists(options_.store, ec)) {
            Study previous = load_study(options_.store);
            if (previous.seed != options_.seed || previous.sampler != options_.sampler) {
                fail(ErrorKind::config, "study log " + options_.store.string() + " was written with seed " +
                                            std::to_string(previous.seed) + " and sampler " +
                                            std::string(to_string(previous.sampler)));
            }
            for (auto& t : previous.trials) {
                if (t.state == TrialState::running) break;
                study_.trials.push_back(std::move(t));
            }
        }
        std::string text = header_line(study_) + "\n";
        for (const auto& t : study_.trials) {
            text += suggested_line(t) + "\n";
            for (const auto& [step, v] : t.intermediate) text += intermediate_line(t.id, step, v) + "\n";
            text += terminal_line(t) + "\n";
        }
        write_file(options_.store, text);
        out_.open(options_.store, std::ios::app | std::ios::binary);
        if (!out_) fail(ErrorKind::io, "cannot append to " + options_.store.string());
    }

    void append(const std::string& line) {
        if (!out_.is_open()) return;
        out_ << line << '\n';
        out_.flush();
        if (!out_) fail(ErrorKind::io, "write failed on " + options_.store.string());
    }

    void work() {
        for (;;) {
            std::size_t id = 0;
            Params params;
            {
                std::lock_guard lock(mutex_);
                if (next_id_ >= options_.n_trials) return;
                id = next_id_++;
                Rng rng = Rng::derive(options_.seed, id);
                params = options_.sampler == SamplerKind::tpe ? suggest(study_.trials, space_, options_.tpe, rng)
                                                              : sample_random(space_, rng);
                Trial t;
                t.id = id;
                t.params = params;
                study_.trials.push_back(t);
                append(suggested_line(t));
            }
            TrialContext ctx(*this, id, params);
            TrialState state = TrialState::complete;
            double value = 0.0;
            std::string error;
            try {
                value = objective_(ctx);
                if (!std::isfinite(value)) {
                    state = TrialState::failed;
                    error = "objective returned a non-finite value";
                }
            } catch (const TrialPruned&) {
                state = TrialState::pruned;
            } catch (const std::exception& e) {
                state = TrialState::failed;
                error = e.what();
            }
            std::lock_guard lock(mutex_);
            Trial& t = study_.trials[id];
            t.state = state;
            if (state == TrialState::complete) t.value = value;
            t.error = error;
            append(terminal_line(t));
        }
    }

    const SearchSpace& space_;
    const ObjectiveFn& objective_;
    StudyOptions options_;
    Study study_;
    std::mutex mutex_;
    std::ofstream out_;
    std::size_t next_id_ = 0;
};

void TrialContext::report(std::size_t step, double value) {
    runner_.report(id_, step, value);
}

Study run_study(const SearchSpace& space, const ObjectiveFn& objective, const StudyOptions& options) {
    StudyRunner runner(space, objective, options);
    return runner.run();
}

// ---------------------------------------------------------------------------
// summaries

namespace {

GroupSummary summarize_group(std::span<const Trial* const> trials, const SearchSpace& space) {
    GroupSummary g;
    g.trials = trials.size();
    for (const auto* t : trials) g.avg_value += *t->value;
    g.avg_value /= double(trials.size());
    for (const auto& p : space.params) {
        if (p.kind == ParamKind::categorical) {
            std::vector<std::size_t> counts(p.choices.size(), 0);
            for (const auto* t : trials) {
                auto it = t->params.find(p.name);
                if (it == t->params.end() || !std::holds_alternative<std::string>(it->second)) continue;
                auto c = std::find(p.choices.begin(), p.choices.end(), std::get<std::string>(it->second));
                if (c != p.choices.end()) ++counts[std::size_t(c - p.choices.begin())];
            }
            g.modes[p.name] = p.choices[std::size_t(std::max_element(counts.begin(), counts.end()) - counts.begin())];
        } else {
            double sum = 0.0;
            std::size_t n = 0;
            for (const auto* t : trials) {
                if (!t->params.count(p.name)) continue;
                sum += param_number(t->params, p.name);
                ++n;
            }
            g.means[p.name] = n ? sum / double(n) : 0.0;
        }
    }
    return g;
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace

StudySummary summarize_study(const Study& study, const SearchSpace& space, double top_frac, double bottom_frac) {
    if (!(top_frac > 0.0 && top_frac <= 1.0) || !(bottom_frac > 0.0 && bottom_frac <= 1.0)) {
        fail(ErrorKind::config, "summary fractions must lie in (0, 1]");
    }
    std::vector<const Trial*> done;
    for (const auto& t : study.trials) {
        if (t.state == TrialState::complete && t.value) done.push_back(&t);
    }
    if (done.empty()) fail(ErrorKind::data, "study has no complete trials to summarise");
    std::stable_sort(done.begin(), done.end(), [](const Trial* a, const Trial* b) {
        return *a->value != *b->value ? *a->value < *b->value : a->id < b->id;
    });
    auto group_size = [&](double frac) {
        return std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(frac * double(done.size()))), 1, done.size());
    };
    const std::size_t top = group_size(top_frac), bottom = group_size(bottom_frac);
    StudySummary s;
    s.top_frac = top_frac;
    s.bottom_frac = bottom_frac;
    s.best = summarize_group(std::span<const Trial* const>(done).first(top), space);
    s.worst = summarize_group(std::span<const Trial* const>(done).last(bottom), space);
    return s;
}

std::string StudySummary::to_tsv(const SearchSpace& space, const std::string& value_label) const {
    auto pct = [](double f) { return format_double(std::round(f * 1000.0) / 10.0) + "%"; };
    std::string out = "Parameter\tSearch range\t" + pct(top_frac) + " Best runs Mean\t" + pct(bottom_frac) +
                      " Worst runs Mean\n";
    auto cell = [&](const GroupSummary& g, const ParamSpec& p) -> std::string {
        if (p.kind == ParamKind::categorical) return g.modes.at(p.name);
        return fixed(g.means.at(p.name), p.kind == ParamKind::int_range ? 1 : 2);
    };
    for (const auto& p : space.params) {
        out += p.name + "\t" + p.describe() + "\t" + cell(best, p) + "\t" + cell(worst, p) + "\n";
    }
    out += value_label + "\t-\t" + fixed(best.avg_value, 2) + "\t" + fixed(worst.avg_value, 2) + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// objectives

ModelConfig model_config_from_params(const Params& params, ModelConfig base) {
    for (const auto& [name, value] : params) {
        if (name == "pos_type") base.pos_type = parse_position_type(param_string(params, name));
        else if (name == "activation") base.activation = parse_activation(param_string(params, name));
        else if (name == "num_layers") base.num_layers = std::size_t(param_int(params, name));
        else if (name == "num_heads") base.num_heads = std::size_t(param_int(params, name));
        else if (name == "head_size") base.head_size = std::size_t(param_int(params, name));
        else if (name == "ffn_size") base.ffn_size = std::size_t(param_int(params, name));
        else if (name == "dropout") base.dropout = float(std::min(param_number(params, name), 0.95));
        else if (name == "attention_dropout") base.attention_dropout = float(std::min(param_number(params, name), 0.95));
        else fail(ErrorKind::config, "search parameter '" + name + "' does not map onto the model configuration");
    }
    base.validate();
    return base;
}

double PretrainObjective::operator()(TrialContext& trial) const {
    if (!train_data || !val_data) fail(ErrorKind::usage, "pretraining objective needs train and validation data");
    const ModelConfig config = model_config_from_params(trial.params(), base);
    TrainConfig tc = train;
    tc.checkpoint_dir.clear();
    tc.metrics_path.clear();
    auto model = TransformerModel::init(config, mix_seed(tc.seed, trial.id()));
    double last = std::numeric_limits<double>::quiet_NaN();
    tinylm::train(model, *train_data, *val_data, tc, policy, [&](const EpochRecord& r, const TransformerModel&) {
        last = r.perplexity;
        trial.report(r.epoch, r.perplexity);
        return true;
    });
    return last;
}

}  // namespace tinylm
