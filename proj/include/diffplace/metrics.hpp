#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffplace {

// One evaluated instance: predicted and ground-truth slot per element. Slots
// are grid cell indices for puzzles and ranks for sequences; in both cases the
// mapping element -> slot is injective.
struct InstanceResult {
    std::vector<int> pred;
    std::vector<int> gt;
};

struct MetricsReport {
    double direct_comparison = 0.0;  // % pieces in the correct slot, pooled over the set
    double solved_rate = 0.0;        // % instances with every piece correct
    double accuracy = 0.0;           // % elements at the correct position, pooled
    double pmr = 0.0;                // % instances fully ordered
    double kendall_tau = 0.0;        // mean per-instance tau
    double spearman = 0.0;           // mean per-instance Spearman rho
    double pairwise_accuracy = 0.0;  // mean per-instance concordant-pair fraction
    double average_distance = 0.0;   // mean per-instance |pred - gt| displacement
    long instances = 0;
    long elements = 0;
};

namespace detail {

inline void check_pair(const std::vector<int>& pred, const std::vector<int>& gt, std::size_t min_k,
                       const char* what) {
    if (pred.size() != gt.size()) throw std::invalid_argument(std::string(what) + ": size mismatch");
    if (pred.size() < min_k) throw std::invalid_argument(std::string(what) + ": too few elements");
}

inline double fraction_correct_pooled(const std::vector<InstanceResult>& results,
                                      const char* what) {
    if (results.empty()) throw std::invalid_argument(std::string(what) + ": empty input");
    long correct = 0, total = 0;
    for (const auto& r : results) {
        check_pair(r.pred, r.gt, 1, what);
        for (std::size_t i = 0; i < r.pred.size(); ++i) correct += r.pred[i] == r.gt[i];
        total += long(r.pred.size());
    }
    return 100.0 * double(correct) / double(total);
}

inline double fraction_perfect(const std::vector<InstanceResult>& results, const char* what) {
    if (results.empty()) throw std::invalid_argument(std::string(what) + ": empty input");
    long perfect = 0;
    for (const auto& r : results) {
        check_pair(r.pred, r.gt, 1, what);
        bool ok = true;
        for (std::size_t i = 0; i < r.pred.size(); ++i) ok &= r.pred[i] == r.gt[i];
        perfect += ok;
    }
    return 100.0 * double(perfect) / double(results.size());
}

}  // namespace detail

inline double direct_comparison(const std::vector<InstanceResult>& results) {
    return detail::fraction_correct_pooled(results, "direct_comparison");
}

inline double solved_rate(const std::vector<InstanceResult>& results) {
    return detail::fraction_perfect(results, "solved_rate");
}

inline double accuracy(const std::vector<InstanceResult>& results) {
    return detail::fraction_correct_pooled(results, "accuracy");
}

inline double pmr(const std::vector<InstanceResult>& results) {
    return detail::fraction_perfect(results, "pmr");
}

// tau = 1 - 2 * (#discordant pairs) / C(K, 2).
inline double kendall_tau(const std::vector<int>& pred, const std::vector<int>& gt) {
    detail::check_pair(pred, gt, 2, "kendall_tau");
    const std::size_t k = pred.size();
    long discordant = 0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i + 1; j < k; ++j) {
            const long a = long(pred[i]) - long(pred[j]);
            const long b = long(gt[i]) - long(gt[j]);
            discordant += (a > 0 && b < 0) || (a < 0 && b > 0);
        }
    const double pairs = 0.5 * double(k) * double(k - 1);
    return 1.0 - 2.0 * double(discordant) / pairs;
}

namespace detail {

// Average ranks (1-based, ties share the mean rank).
inline std::vector<double> average_ranks(const std::vector<int>& values) {
    const std::size_t k = values.size();
    std::vector<std::size_t> order(k);
    for (std::size_t i = 0; i < k; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(k, 0.0);
    std::size_t i = 0;
    while (i < k) {
        std::size_t j = i;
        while (j + 1 < k && values[order[j + 1]] == values[order[i]]) ++j;
        const double mean_rank = 0.5 * (double(i) + double(j)) + 1.0;
        for (std::size_t p = i; p <= j; ++p) ranks[order[p]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

}  // namespace detail

// Pearson correlation of the (average-)ranked values. For untied rankings this
// equals the closed form 1 - 6 * sum(d^2) / (K (K^2 - 1)).
inline double spearman(const std::vector<int>& pred, const std::vector<int>& gt) {
    detail::check_pair(pred, gt, 2, "spearman");
    const std::vector<double> ra = detail::average_ranks(pred);
    const std::vector<double> rb = detail::average_ranks(gt);
    const std::size_t k = ra.size();
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= double(k);
    mb /= double(k);
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double da = ra[i] - ma;
        const double db = rb[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;  // fully tied ranking carries no order signal
    return sab / std::sqrt(saa * sbb);
}

// Concordant pairs / C(K, 2); tied predictions count as not concordant.
inline double pairwise_accuracy(const std::vector<int>& pred, const std::vector<int>& gt) {
    detail::check_pair(pred, gt, 2, "pairwise_accuracy");
    const std::size_t k = pred.size();
    long concordant = 0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i + 1; j < k; ++j) {
            const long a = long(pred[i]) - long(pred[j]);
            const long b = long(gt[i]) - long(gt[j]);
            concordant += (a > 0 && b > 0) || (a < 0 && b < 0);
        }
    const double pairs = 0.5 * double(k) * double(k - 1);
    return double(concordant) / pairs;
}

inline double average_distance(const std::vector<int>& pred, const std::vector<int>& gt) {
    detail::check_pair(pred, gt, 1, "average_distance");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - gt[i]);
    return acc / double(pred.size());
}

// Pooled metrics pool over elements; rank metrics are averaged uniformly over
// instances (instances need K >= 2 to contribute to pair-based metrics).
inline MetricsReport aggregate_metrics(const std::vector<InstanceResult>& results) {
    MetricsReport rep;
    rep.direct_comparison = direct_comparison(results);
    rep.accuracy = accuracy(results);
    rep.solved_rate = solved_rate(results);
    rep.pmr = pmr(results);
    rep.instances = long(results.size());
    double tau = 0.0, rho = 0.0, pw = 0.0, dist = 0.0;
    long pair_instances = 0;
    for (const auto& r : results) {
        rep.elements += long(r.pred.size());
        dist += average_distance(r.pred, r.gt);
        if (r.pred.size() >= 2) {
            tau += kendall_tau(r.pred, r.gt);
            rho += spearman(r.pred, r.gt);
            pw += pairwise_accuracy(r.pred, r.gt);
            ++pair_instances;
        }
    }
    rep.average_distance = dist / double(results.size());
    if (pair_instances > 0) {
        rep.kendall_tau = tau / double(pair_instances);
        rep.spearman = rho / double(pair_instances);
        rep.pairwise_accuracy = pw / double(pair_instances);
    }
    return rep;
}

// Stable text serialization (fixed key order, 4-decimal values) so reports can
// be compared byte-for-byte.
inline std::string format_report(const MetricsReport& rep) {
    auto fmt = [](double x) {
        if (x == 0.0) x = 0.0;  // normalize -0
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.4f", x);
        return std::string(buf);
    };
    std::string out;
    out += "direct_comparison: " + fmt(rep.direct_comparison) + "\n";
    out += "solved_rate: " + fmt(rep.solved_rate) + "\n";
    out += "accuracy: " + fmt(rep.accuracy) + "\n";
    out += "pmr: " + fmt(rep.pmr) + "\n";
    out += "kendall_tau: " + fmt(rep.kendall_tau) + "\n";
    out += "spearman: " + fmt(rep.spearman) + "\n";
    out += "pairwise_accuracy: " + fmt(rep.pairwise_accuracy) + "\n";
    out += "average_distance: " + fmt(rep.average_distance) + "\n";
    out += "instances: " + std::to_string(rep.instances) + "\n";
    out += "elements: " + std::to_string(rep.elements) + "\n";
    return out;
}

}  // namespace diffplace
