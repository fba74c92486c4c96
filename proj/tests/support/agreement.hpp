#pragma once

// Artificial English fragment with subject-verb number agreement. Subjects
// may carry a prepositional attractor whose noun has either number.

#include <set>
#include <string>
#include <vector>

#include "tinylm/eval.hpp"
#include "tinylm/rng.hpp"

namespace tinylm::testing {

struct AgreementSentence {
    std::string good;
    std::string bad;  // same sentence with the verb in the wrong number
};

class AgreementGrammar {
public:
    explicit AgreementGrammar(Rng rng) : rng_(rng) {}

    AgreementSentence next() {
        const bool plural = rng_.bernoulli(0.5);
        std::string subject = determiner(plural) + " " + adjective() + noun(plural);
        if (rng_.bernoulli(0.25)) subject += " near " + determiner(rng_.bernoulli(0.5), true);
        const auto& verb = pick(kVerbs);
        std::string rest;
        switch (verb.frame) {
            case Frame::intransitive:
                if (rng_.bernoulli(0.4)) rest = " " + pick(kPlaces);
                break;
            case Frame::transitive: {
                const bool obj_plural = rng_.bernoulli(0.5);
                rest = " " + determiner(obj_plural) + " " + noun(obj_plural);
                break;
            }
            case Frame::copula:
                rest = " " + pick(kPredicates);
                break;
        }
        const std::string& right = plural ? verb.plural : verb.singular;
        const std::string& wrong = plural ? verb.singular : verb.plural;
        return {subject + " " + right + rest + " .", subject + " " + wrong + rest + " ."};
    }

    std::vector<AgreementSentence> take(std::size_t n) {
        std::vector<AgreementSentence> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) out.push_back(next());
        return out;
    }

private:
    enum class Frame { intransitive, transitive, copula };
    struct Verb {
        std::string singular, plural;
        Frame frame;
    };
    struct Noun {
        std::string singular, plural;
    };

    inline static const std::vector<Noun> kNouns = {
        {"cat", "cats"},       {"dog", "dogs"},         {"bird", "birds"},   {"girl", "girls"},
        {"boy", "boys"},       {"teacher", "teachers"}, {"farmer", "farmers"}, {"horse", "horses"},
        {"child", "children"}, {"man", "men"},          {"woman", "women"},  {"friend", "friends"}};
    inline static const std::vector<Verb> kVerbs = {
        {"runs", "run", Frame::intransitive},     {"sleeps", "sleep", Frame::intransitive},
        {"sings", "sing", Frame::intransitive},   {"waits", "wait", Frame::intransitive},
        {"smiles", "smile", Frame::intransitive}, {"jumps", "jump", Frame::intransitive},
        {"sees", "see", Frame::transitive},       {"likes", "like", Frame::transitive},
        {"helps", "help", Frame::transitive},     {"finds", "find", Frame::transitive},
        {"is", "are", Frame::copula},             {"was", "were", Frame::copula}};
    inline static const std::vector<std::string> kAdjectives = {"big", "old", "little", "young", "happy"};
    inline static const std::vector<std::string> kPlaces = {"today", "at home", "in the garden", "outside",
                                                            "again"};
    inline static const std::vector<std::string> kPredicates = {"happy", "tall", "here", "tired", "late"};

    template <class T>
    const T& pick(const std::vector<T>& xs) {
        return xs[std::size_t(rng_.uniform_int(0, std::int64_t(xs.size()) - 1))];
    }

    std::string noun(bool plural) {
        const auto& n = pick(kNouns);
        return plural ? n.plural : n.singular;
    }

    std::string adjective() { return rng_.bernoulli(0.3) ? pick(kAdjectives) + " " : std::string(); }

    std::string determiner(bool plural, bool with_noun = false) {
        static const std::vector<std::string> sing = {"the", "the", "this", "that"};
        static const std::vector<std::string> plur = {"the", "the", "these", "those"};
        std::string d = pick(plural ? plur : sing);
        return with_noun ? d + " " + noun(plural) : d;
    }

    Rng rng_;
};

// Training sentences plus held-out minimal pairs whose good sentence never
// occurs in the training set.
struct AgreementData {
    std::vector<std::string> train;
    std::vector<MinimalPair> pairs;
};

inline AgreementData make_agreement_data(std::size_t n_train, std::size_t n_pairs, std::uint64_t seed) {
    AgreementData d;
    AgreementGrammar train_grammar(Rng::derive(seed, 1));
    std::set<std::string> seen;
    for (const auto& s : train_grammar.take(n_train)) {
        d.train.push_back(s.good);
        seen.insert(s.good);
    }
    AgreementGrammar test_grammar(Rng::derive(seed, 2));
    while (d.pairs.size() < n_pairs) {
        auto s = test_grammar.next();
        if (seen.insert(s.good).second) d.pairs.push_back({s.good, s.bad, "agreement", "subject_verb"});
    }
    return d;
}

}  // namespace tinylm::testing
