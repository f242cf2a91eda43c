#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffplace/assign.hpp"
#include "diffplace/checkpoint.hpp"
#include "diffplace/datagen.hpp"
#include "diffplace/diffusion.hpp"
#include "diffplace/instances.hpp"
#include "diffplace/metrics.hpp"
#include "diffplace/model.hpp"
#include "diffplace/optim.hpp"
#include "diffplace/parallel.hpp"

namespace diffplace {

template <typename T>
Mat<T> encode_features(const Model<T>& model, const PuzzleInstance& inst,
                       std::vector<PatchEncoderCache<T>>* caches = nullptr) {
    const int k = inst.element_count();
    Mat<T> h(k, model.cfg.denoiser.feature_dim);
    if (caches) caches->resize(std::size_t(k));
    PatchEncoderCache<T> scratch;
    for (int i = 0; i < k; ++i) {
        PatchEncoderCache<T>& c = caches ? (*caches)[std::size_t(i)] : scratch;
        model.patch_encoder.forward(inst.patches[std::size_t(i)].px, h.row(i), c);
    }
    return h;
}

template <typename T>
Mat<T> encode_features(const Model<T>& model, const SequenceInstance& inst,
                       std::vector<PatchEncoderCache<T>>* /*caches*/ = nullptr) {
    const int k = inst.element_count();
    Mat<T> h(k, model.cfg.denoiser.feature_dim);
    for (int i = 0; i < k; ++i) model.token_encoder.forward(inst.elements[std::size_t(i)], h.row(i));
    return h;
}

// Ground-truth continuous positions: grid cell centers for puzzles, interval
// centers for sequences.
template <typename T>
Mat<T> gt_positions(const PuzzleInstance& inst) {
    const GridSpec grid = make_grid(inst.n);
    const int k = inst.element_count();
    Mat<T> x0(k, 2);
    for (int i = 0; i < k; ++i) {
        const auto& c = grid.centers[std::size_t(inst.gt_cell[std::size_t(i)])];
        x0(i, 0) = T(c[0]);
        x0(i, 1) = T(c[1]);
    }
    return x0;
}

template <typename T>
Mat<T> gt_positions(const SequenceInstance& inst) {
    const int k = inst.element_count();
    const std::vector<double> pos = sequence_positions(k);
    Mat<T> x0(k, 1);
    for (int i = 0; i < k; ++i) x0(i, 0) = T(pos[std::size_t(inst.gt_rank[std::size_t(i)])]);
    return x0;
}

template <typename T>
std::vector<int> gt_slots(const PuzzleInstance& inst) {
    return inst.gt_cell;
}

template <typename T>
std::vector<int> gt_slots(const SequenceInstance& inst) {
    return inst.gt_rank;
}

template <typename T>
Assignment decode_positions(const Mat<T>& pred, const PuzzleInstance& inst) {
    return greedy_assign(pred, make_grid(inst.n));
}

template <typename T>
Assignment decode_positions(const Mat<T>& pred, const SequenceInstance& inst) {
    return order_from_positions(pred);
}

struct TrainSettings {
    SchedulePlan plan;
    AdamSettings opt;
    int epochs = 10;
    int batch = 16;
    std::uint64_t seed = 7;
    long checkpoint_every = 0;  // steps; 0 = only final
    std::vector<int> puzzle_sizes{3, 4};
};

template <typename T>
struct TrainState {
    Model<T> model;
    TrainSettings settings;
    NoiseSchedule sched;
    AdamState<T> adam;
    long step = 0;

    // Per-slot gradient buffers: the slot count is fixed so reductions are
    // identical for any thread count.
    static constexpr int kSlots = 8;
    std::vector<Model<T>> slot_grads;
    Model<T> grads;

    static TrainState init(Model<T> model, const TrainSettings& s) {
        s.opt.validate();
        TrainState st;
        st.model = std::move(model);
        st.settings = s;
        st.sched = build_linear_schedule(s.plan.T, s.plan.beta_start, s.plan.beta_end);
        st.adam.init(st.model);
        st.grads = Model<T>::zeros_like(st.model);
        st.slot_grads.reserve(kSlots);
        for (int i = 0; i < kSlots; ++i) st.slot_grads.push_back(Model<T>::zeros_like(st.model));
        return st;
    }
};

namespace trainer_detail {

template <typename T, typename Inst>
struct SlotWork {
    GraphBatch<T> batch;
    Mat<T> eps;
    Mat<T> eps_hat;
    DenoiserCache<T> cache;
    std::vector<const Inst*> instances;
    std::vector<std::vector<PatchEncoderCache<T>>> enc_caches;  // puzzle only
    double sq_sum = 0.0;
};

template <typename T>
void encoder_backward(const Model<T>& model, Model<T>& grads, const PuzzleInstance& inst,
                      const std::vector<PatchEncoderCache<T>>& caches, const Mat<T>& d_h,
                      int row0) {
    for (int i = 0; i < inst.element_count(); ++i)
        model.patch_encoder.backward(caches[std::size_t(i)], d_h.row(row0 + i),
                                     grads.patch_encoder);
}

template <typename T>
void encoder_backward(const Model<T>& model, Model<T>& grads, const SequenceInstance& inst,
                      const std::vector<PatchEncoderCache<T>>& /*caches*/, const Mat<T>& d_h,
                      int row0) {
    for (int i = 0; i < inst.element_count(); ++i)
        model.token_encoder.backward(inst.elements[std::size_t(i)], d_h.row(row0 + i),
                                     grads.token_encoder);
}

}  // namespace trainer_detail

// One optimizer step over a batch of instances. Per graph: draw one t uniform
// in [1, T] and per-node unit noise, noise the ground-truth positions, predict
// the noise, and take an Adam step on the mean squared error. Deterministic
// given (model, batch, step seed) for any thread count.
template <typename T, typename Inst>
double train_step(TrainState<T>& st, const std::vector<const Inst*>& batch) {
    using trainer_detail::SlotWork;
    const int b = int(batch.size());
    if (b == 0) throw std::invalid_argument("train_step: empty batch");
    const std::uint64_t step_seed = Rng::mix(st.settings.seed, std::uint64_t(st.step));
    const int n_dim = st.model.cfg.denoiser.position_dim;
    const int slots = TrainState<T>::kSlots;

    std::vector<SlotWork<T, Inst>> work((std::size_t(slots)));
    for (int i = 0; i < b; ++i)
        work[std::size_t(std::int64_t(i) * slots / b)].instances.push_back(batch[std::size_t(i)]);

    // Forward phase: encode features, sample (t, eps), noise positions, run
    // the denoiser. Parallel over slots; all randomness is indexed by the
    // instance's position in the batch.
    std::vector<int> first_index(std::size_t(slots), 0);
    for (int s = 1; s < slots; ++s)
        first_index[std::size_t(s)] =
            first_index[std::size_t(s) - 1] + int(work[std::size_t(s) - 1].instances.size());

    parallel_for(slots, [&](int s) {
        SlotWork<T, Inst>& w = work[std::size_t(s)];
        const int g_count = int(w.instances.size());
        if (g_count == 0) return;
        int total_nodes = 0;
        for (const Inst* inst : w.instances) total_nodes += inst->element_count();
        w.batch.features.resize(total_nodes, st.model.cfg.denoiser.feature_dim);
        w.batch.positions.resize(total_nodes, n_dim);
        w.eps.resize(total_nodes, n_dim);
        w.batch.offsets.assign(1, 0);
        w.batch.timesteps.clear();
        w.enc_caches.resize(std::size_t(g_count));

        int row = 0;
        for (int g = 0; g < g_count; ++g) {
            const Inst& inst = *w.instances[std::size_t(g)];
            const int k = inst.element_count();
            Rng rng(Rng::mix(step_seed, std::uint64_t(first_index[std::size_t(s)] + g)));
            const int t = 1 + int(rng.below(std::uint64_t(st.settings.plan.T)));
            w.batch.timesteps.push_back(t);
            w.batch.offsets.push_back(row + k);

            const Mat<T> h = encode_features(st.model, inst, &w.enc_caches[std::size_t(g)]);
            const Mat<T> x0 = gt_positions<T>(inst);
            const double sa = std::sqrt(st.sched.alpha_bar_at(t));
            const double sb = std::sqrt(1.0 - st.sched.alpha_bar_at(t));
            for (int i = 0; i < k; ++i) {
                for (int j = 0; j < st.model.cfg.denoiser.feature_dim; ++j)
                    w.batch.features(row + i, j) = h(i, j);
                for (int j = 0; j < n_dim; ++j) {
                    const T e = T(rng.normal());
                    w.eps(row + i, j) = e;
                    w.batch.positions(row + i, j) = T(sa * double(x0(i, j)) + sb * double(e));
                }
            }
            row += k;
        }
        w.eps_hat = st.model.denoiser.forward(w.batch, w.cache);
        double sq = 0.0;
        for (std::size_t i = 0; i < w.eps.size(); ++i) {
            const double d = double(w.eps_hat.v[i]) - double(w.eps.v[i]);
            sq += d * d;
        }
        w.sq_sum = sq;
    });

    long total_entries = 0;
    double loss_sum = 0.0;
    for (int s = 0; s < slots; ++s) {
        total_entries += long(work[std::size_t(s)].eps.size());
        loss_sum += work[std::size_t(s)].sq_sum;
    }
    const double loss = loss_sum / double(total_entries);
    if (!std::isfinite(loss)) {
        std::string ids;
        for (const Inst* inst : batch) ids += std::to_string(inst->source_id) + " ";
        throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(st.step) +
                                 " (batch ids: " + ids + ")");
    }

    // Backward phase into per-slot buffers, then an ordered reduction.
    parallel_for(slots, [&](int s) {
        SlotWork<T, Inst>& w = work[std::size_t(s)];
        st.slot_grads[std::size_t(s)].zero();
        if (w.instances.empty()) return;
        Mat<T> d_eps(w.eps.rows, w.eps.cols);
        const double scale = 2.0 / double(total_entries);
        for (std::size_t i = 0; i < w.eps.size(); ++i)
            d_eps.v[i] = T(scale * (double(w.eps_hat.v[i]) - double(w.eps.v[i])));
        const Mat<T> d_h = st.model.denoiser.backward(w.batch, w.cache, d_eps,
                                                      st.slot_grads[std::size_t(s)].denoiser);
        for (int g = 0; g < int(w.instances.size()); ++g)
            trainer_detail::encoder_backward(st.model, st.slot_grads[std::size_t(s)],
                                             *w.instances[std::size_t(g)],
                                             w.enc_caches[std::size_t(g)], d_h,
                                             w.batch.offsets[std::size_t(g)]);
    });

    st.grads.zero();
    for (int s = 0; s < slots; ++s) {
        std::vector<Mat<T>*> src;
        st.slot_grads[std::size_t(s)].for_each_param(
            [&](const std::string&, Mat<T>& p) { src.push_back(&p); });
        std::size_t idx = 0;
        st.grads.for_each_param([&](const std::string&, Mat<T>& p) {
            const Mat<T>& g = *src[idx++];
            for (std::size_t i = 0; i < p.size(); ++i) p.v[i] += g.v[i];
        });
    }

    clip_gradients<T>(st.grads, st.settings.opt.clip_norm);
    adam_update(st.model, st.grads, st.adam, st.settings.opt);
    ++st.step;
    return loss;
}

// Deterministic batch scheduling: epoch order and the per-item puzzle size
// are pure functions of (seed, epoch, item), so training can resume from a
// checkpointed step and reproduce the uninterrupted run exactly.
struct PuzzleTrainDriver {
    const PuzzleDataset* ds = nullptr;
    std::vector<int> train_idx;
    std::vector<int> sizes{3, 4};
    int batch = 16;
    std::uint64_t seed = 7;

    static PuzzleTrainDriver make(const PuzzleDataset& ds, const TrainSettings& s) {
        PuzzleTrainDriver d;
        d.ds = &ds;
        d.train_idx = ds.indices_of(Split::train);
        d.sizes = s.puzzle_sizes;
        d.batch = s.batch;
        d.seed = s.seed;
        if (d.train_idx.empty()) throw std::runtime_error("PuzzleTrainDriver: empty train split");
        return d;
    }

    long steps_per_epoch() const {
        return (long(train_idx.size()) + batch - 1) / batch;
    }

    std::vector<PuzzleInstance> batch_for_step(long step) const {
        const long spe = steps_per_epoch();
        const long epoch = step / spe;
        const long pos = step % spe;
        Rng order_rng(Rng::mix(seed, 0xE90C0000ull + std::uint64_t(epoch)));
        const std::vector<int> order = random_permutation(int(train_idx.size()), order_rng);
        std::vector<PuzzleInstance> out;
        for (long i = pos * batch; i < std::min<long>((pos + 1) * batch, long(order.size())); ++i) {
            const int item = train_idx[std::size_t(order[std::size_t(i)])];
            const DatasetItem& it = ds->items[std::size_t(item)];
            Rng size_rng(Rng::mix(it.seed, 0x512E0000ull + std::uint64_t(epoch)));
            const int n = sizes[std::size_t(size_rng.below(sizes.size()))];
            out.push_back(make_puzzle_instance(ds->images[std::size_t(item)], n, it.id,
                                               Rng::mix(it.seed, 0x5FF1E)));
        }
        return out;
    }
};

struct SequenceTrainDriver {
    const SequenceDataset* ds = nullptr;
    std::vector<int> train_idx;
    int batch = 32;
    std::uint64_t seed = 7;

    static SequenceTrainDriver make(const SequenceDataset& ds, const TrainSettings& s) {
        SequenceTrainDriver d;
        d.ds = &ds;
        d.train_idx = ds.indices_of(Split::train);
        d.batch = s.batch;
        d.seed = s.seed;
        if (d.train_idx.empty()) throw std::runtime_error("SequenceTrainDriver: empty train split");
        return d;
    }

    long steps_per_epoch() const {
        return (long(train_idx.size()) + batch - 1) / batch;
    }

    std::vector<const SequenceInstance*> batch_for_step(long step) const {
        const long spe = steps_per_epoch();
        const long epoch = step / spe;
        const long pos = step % spe;
        Rng order_rng(Rng::mix(seed, 0xE90C0000ull + std::uint64_t(epoch)));
        const std::vector<int> order = random_permutation(int(train_idx.size()), order_rng);
        std::vector<const SequenceInstance*> out;
        for (long i = pos * batch; i < std::min<long>((pos + 1) * batch, long(order.size())); ++i)
            out.push_back(
                &ds->instances[std::size_t(train_idx[std::size_t(order[std::size_t(i)])])]);
        return out;
    }
};

// Materializes puzzle instances for an evaluation split, one per (image,
// size) pair; a single mixed-size checkpoint evaluates every configured size.
inline std::vector<PuzzleInstance> puzzle_eval_instances(const PuzzleDataset& ds, Split split,
                                                         const std::vector<int>& sizes) {
    std::vector<PuzzleInstance> out;
    for (const int idx : ds.indices_of(split))
        for (const int n : sizes)
            out.push_back(make_puzzle_instance(ds.images[std::size_t(idx)], n,
                                               ds.items[std::size_t(idx)].id,
                                               Rng::mix(ds.items[std::size_t(idx)].seed, 0x5FF1E)));
    return out;
}

inline std::vector<const SequenceInstance*> sequence_eval_instances(const SequenceDataset& ds,
                                                                    Split split) {
    std::vector<const SequenceInstance*> out;
    for (const int idx : ds.indices_of(split)) out.push_back(&ds.instances[std::size_t(idx)]);
    return out;
}

template <typename Inst>
std::vector<const Inst*> instance_pointers(const std::vector<Inst>& v) {
    std::vector<const Inst*> out;
    out.reserve(v.size());
    for (const Inst& i : v) out.push_back(&i);
    return out;
}

struct EvalSettings {
    InitMode init = InitMode::zero_centered;
    std::uint64_t gaussian_seed = 0;
    bool oracle = false;  // planted consistent noise toward the gt positions
};

// Runs the full reverse process per instance, decodes discrete slots, and
// aggregates every metric. Parallel over instances with an index-ordered
// reduction so reports are byte-stable.
template <typename T, typename Inst>
MetricsReport evaluate(const Model<T>& model, const SchedulePlan& plan,
                       const std::vector<const Inst*>& instances, const EvalSettings& es,
                       std::vector<InstanceResult>* per_instance = nullptr) {
    if (instances.empty()) throw std::invalid_argument("evaluate: empty instance list");
    const NoiseSchedule sched = build_linear_schedule(plan.T, plan.beta_start, plan.beta_end);
    DiffusionConfig cfg;
    cfg.T = plan.T;
    cfg.inference_ratio = plan.inference_ratio;
    cfg.init_mode = es.init;
    cfg.position_dim = model.cfg.denoiser.position_dim;

    std::vector<InstanceResult> results(instances.size());
    parallel_for(int(instances.size()), [&](int idx) {
        const Inst& inst = *instances[std::size_t(idx)];
        const Mat<T> h = encode_features(model, inst);
        const Mat<T> x0 = gt_positions<T>(inst);
        DenoiserCache<T> cache;
        auto denoise_fn = [&](const Mat<T>& x, int t, const Mat<T>& features) {
            if (es.oracle) {
                const double abar = sched.alpha_bar_at(t);
                Mat<T> eps(x.rows, x.cols);
                const double denom = std::sqrt(1.0 - abar);
                for (std::size_t i = 0; i < x.size(); ++i)
                    eps.v[i] = T((double(x.v[i]) - std::sqrt(abar) * double(x0.v[i])) / denom);
                return eps;
            }
            GraphBatch<T> gb;
            gb.features = features;
            gb.positions = x;
            gb.offsets = {0, x.rows};
            gb.timesteps = {t};
            return model.denoiser.forward(gb, cache);
        };
        Rng rng(Rng::mix(es.gaussian_seed, std::uint64_t(idx)));
        Rng* rng_ptr = es.init == InitMode::standard_gaussian ? &rng : nullptr;
        const Mat<T> pred = reverse_process(denoise_fn, h, cfg, sched, rng_ptr);
        const Assignment a = decode_positions(pred, inst);
        results[std::size_t(idx)] = {a.slot, gt_slots<T>(inst)};
    });
    if (per_instance) *per_instance = results;
    return aggregate_metrics(results);
}

}  // namespace diffplace
