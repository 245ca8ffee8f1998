#include "kpt/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "kpt/ops.hpp"

namespace kpt {

void Schedule::validate() const {
    if (!(warmup_steps > 0 && warmup_steps < total_steps)) {
        throw std::invalid_argument("schedule: need 0 < warmup_steps < total_steps (got " +
                                    std::to_string(warmup_steps) + ", " + std::to_string(total_steps) + ")");
    }
}

double lr_at(std::size_t step, const Schedule& schedule, double peak_lr) {
    schedule.validate();
    if (step > schedule.total_steps) {
        throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                                std::to_string(schedule.total_steps));
    }
    const double s = static_cast<double>(step);
    const double warm = s / static_cast<double>(schedule.warmup_steps);
    const double decay = static_cast<double>(schedule.total_steps - step) /
                         static_cast<double>(schedule.total_steps - schedule.warmup_steps);
    return peak_lr * std::min(warm, decay);
}

bool decays(const std::string& name) {
    auto ends_with = [&](const std::string& suffix) {
        return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    return !(ends_with(".bias") || ends_with(".gain"));
}

void zero_grads(const NamedTensors& params) {
    for (const auto& [name, p] : params) {
        Tensor t = p;
        t.zero_grad();
    }
}

void adam_step(const NamedTensors& params, OptimizerState& state, double lr) {
    const auto& h = state.hyper;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(h.beta1, t);
    const double c2 = 1.0 - std::pow(h.beta2, t);
    for (const auto& [name, param] : params) {
        if (!param.has_grad()) continue;
        Tensor p = param;
        const std::size_t n = p.numel();
        auto& m = state.first_moment[name];
        auto& v = state.second_moment[name];
        if (m.empty()) m.assign(n, 0.0);
        if (v.empty()) v.assign(n, 0.0);
        if (m.size() != n || v.size() != n) {
            throw std::invalid_argument("adam_step: optimizer state shape mismatch for " + name);
        }
        const Precision prec = p.precision();
        const double wd = decays(name) ? h.weight_decay : 0.0;
        auto g = p.grad();
        auto x = p.mutable_data();
        for (std::size_t i = 0; i < n; ++i) {
            m[i] = round_value(h.beta1 * m[i] + (1.0 - h.beta1) * g[i], prec);
            v[i] = round_value(h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i], prec);
            const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + h.eps);
            x[i] = x[i] - lr * (update + wd * x[i]);
        }
        p.round_to_precision();
    }
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

namespace {

class ByteWriter {
  public:
    void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u64(s.size());
        out_.append(s);
    }
    void raw(const char* s, std::size_t n) { out_.append(s, n); }
    std::string take() { return std::move(out_); }

  private:
    std::string out_;
};

class ByteReader {
  public:
    explicit ByteReader(const std::string& in) : in_(in) {}
    std::uint8_t u8() {
        need(1, "blob length mismatch: file truncated");
        return static_cast<std::uint8_t>(in_[pos_++]);
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint64_t n = u64();
        need(n, "blob length mismatch: file truncated");
        std::string s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    std::vector<float> floats(std::size_t n) {
        need(n * 4, "blob length mismatch");
        std::vector<float> v(n);
        for (auto& x : v) {
            std::uint32_t bits = 0;
            for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(in_[pos_++])) << (8 * i);
            x = std::bit_cast<float>(bits);
        }
        return v;
    }
    std::size_t remaining() const { return in_.size() - pos_; }
    std::string bytes(std::size_t n) {
        need(n, "blob length mismatch: file truncated");
        std::string s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }

  private:
    void need(std::size_t n, const char* what) const {
        if (in_.size() - pos_ < n) throw CheckpointError(what);
    }
    const std::string& in_;
    std::size_t pos_ = 0;
};

std::vector<float> to_floats(std::span<const double> values) {
    std::vector<float> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<float>(values[i]);
    return out;
}

}  // namespace

Checkpoint make_checkpoint(const TransformerModel& model, const OptimizerState* optimizer,
                           const std::mt19937_64* rng, std::uint64_t step,
                           std::map<std::string, std::string> metadata) {
    Checkpoint ckpt;
    ckpt.config = model.config();
    for (const auto& [name, t] : model.parameters()) {
        ckpt.parameters.push_back({name, t.shape(), to_floats(t.data())});
    }
    if (optimizer) {
        OptimizerState st = *optimizer;
        // Persisted moments are f32 and cover every parameter.
        for (const auto& p : ckpt.parameters) {
            for (auto* moments : {&st.first_moment, &st.second_moment}) {
                auto& m = (*moments)[p.name];
                if (m.empty()) m.assign(p.values.size(), 0.0);
                for (auto& x : m) x = round_value(x, Precision::f32);
            }
        }
        ckpt.optimizer = std::move(st);
    }
    if (rng) {
        std::ostringstream os;
        os << *rng;
        ckpt.rng_state = os.str();
    }
    ckpt.step = step;
    ckpt.metadata = std::move(metadata);
    return ckpt;
}

TransformerModel model_from_checkpoint(const Checkpoint& ckpt) {
    TransformerModel model(ckpt.config, 0, InitScheme::zero_output, Precision::f32);
    for (const auto& p : ckpt.parameters) {
        if (p.name.rfind("head.tagging.", 0) == 0 && !model.has_tagging_head()) {
            if (p.shape.size() != 1 && p.shape.size() != 2) throw CheckpointError("bad tagging head shape");
            model.attach_tagging_head(p.shape.back());
        }
    }
    const auto params = model.parameters();
    if (params.size() != ckpt.parameters.size()) {
        throw CheckpointError("checkpoint has " + std::to_string(ckpt.parameters.size()) +
                              " tensors, model expects " + std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& src = ckpt.parameters[i];
        Tensor dst = params[i].second;
        if (params[i].first != src.name || dst.shape() != src.shape) {
            throw CheckpointError("checkpoint tensor '" + src.name + "' " + shape_str(src.shape) +
                                  " does not match model tensor '" + params[i].first + "' " +
                                  shape_str(dst.shape()));
        }
        auto d = dst.mutable_data();
        for (std::size_t j = 0; j < d.size(); ++j) d[j] = static_cast<double>(src.values[j]);
    }
    return model;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    ByteWriter w;
    w.raw("KPLG", 4);
    w.u32(kCheckpointVersion);
    const auto& c = ckpt.config;
    for (std::size_t v : {c.vocab_size, c.d_model, c.n_heads, c.n_enc_layers, c.n_dec_layers, c.d_ff,
                          c.max_len, c.n_categories, c.n_boundary_labels}) {
        w.u64(v);
    }
    w.f64(c.dropout_p);
    w.u64(ckpt.step);
    w.str(ckpt.rng_state);
    w.u32(static_cast<std::uint32_t>(ckpt.metadata.size()));
    for (const auto& [k, v] : ckpt.metadata) {
        w.str(k);
        w.str(v);
    }

    std::vector<const CheckpointTensor*> sorted;
    for (const auto& p : ckpt.parameters) sorted.push_back(&p);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->name < b->name; });
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i]->name == sorted[i - 1]->name) throw CheckpointError("duplicate tensor name " + sorted[i]->name);
    }
    w.u32(static_cast<std::uint32_t>(sorted.size()));
    std::uint64_t floats = 0;
    for (const auto* p : sorted) {
        if (p->values.size() != shape_numel(p->shape)) {
            throw CheckpointError("tensor '" + p->name + "' value count does not match its shape");
        }
        w.str(p->name);
        w.u32(static_cast<std::uint32_t>(p->shape.size()));
        for (auto d : p->shape) w.u64(d);
        floats += p->values.size();
    }
    w.u8(ckpt.optimizer ? 1 : 0);
    if (ckpt.optimizer) {
        const auto& h = ckpt.optimizer->hyper;
        for (double v : {h.peak_lr, h.beta1, h.beta2, h.eps, h.weight_decay}) w.f64(v);
        w.u64(ckpt.optimizer->step);
        floats *= 3;
    }
    w.u64(floats);
    for (const auto* p : sorted) {
        for (float v : p->values) w.f32(v);
    }
    if (ckpt.optimizer) {
        for (const auto* moments : {&ckpt.optimizer->first_moment, &ckpt.optimizer->second_moment}) {
            for (const auto* p : sorted) {
                auto it = moments->find(p->name);
                for (std::size_t i = 0; i < p->values.size(); ++i) {
                    const double x = (it == moments->end() || it->second.empty()) ? 0.0 : it->second.at(i);
                    w.f32(static_cast<float>(x));
                }
            }
        }
    }
    return w.take();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    ByteReader r(bytes);
    if (bytes.size() < 4 || r.bytes(4) != "KPLG") throw CheckpointError("bad magic: not a checkpoint file");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported version " + std::to_string(version));
    }
    Checkpoint ckpt;
    auto& c = ckpt.config;
    for (std::size_t* v : {&c.vocab_size, &c.d_model, &c.n_heads, &c.n_enc_layers, &c.n_dec_layers, &c.d_ff,
                           &c.max_len, &c.n_categories, &c.n_boundary_labels}) {
        *v = r.u64();
    }
    c.dropout_p = r.f64();
    ckpt.step = r.u64();
    ckpt.rng_state = r.str();
    const std::uint32_t n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string k = r.str();
        ckpt.metadata[k] = r.str();
    }
    const std::uint32_t n_params = r.u32();
    std::uint64_t floats = 0;
    for (std::uint32_t i = 0; i < n_params; ++i) {
        CheckpointTensor t;
        t.name = r.str();
        const std::uint32_t rank = r.u32();
        for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.u64());
        if (i > 0 && !(ckpt.parameters.back().name < t.name)) {
            throw CheckpointError("manifest names are not unique and sorted at '" + t.name + "'");
        }
        floats += shape_numel(t.shape);
        ckpt.parameters.push_back(std::move(t));
    }
    if (r.u8() == 1) {
        OptimizerState st;
        for (double* v : {&st.hyper.peak_lr, &st.hyper.beta1, &st.hyper.beta2, &st.hyper.eps, &st.hyper.weight_decay}) {
            *v = r.f64();
        }
        st.step = r.u64();
        ckpt.optimizer = std::move(st);
        floats *= 3;
    }
    const std::uint64_t declared = r.u64();
    if (declared != floats || r.remaining() != floats * 4) throw CheckpointError("blob length mismatch");
    for (auto& p : ckpt.parameters) p.values = r.floats(shape_numel(p.shape));
    if (ckpt.optimizer) {
        for (auto* moments : {&ckpt.optimizer->first_moment, &ckpt.optimizer->second_moment}) {
            for (const auto& p : ckpt.parameters) {
                auto v = r.floats(p.values.size());
                (*moments)[p.name] = std::vector<double>(v.begin(), v.end());
            }
        }
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

std::string trace_header() { return "step,lr,kmlm,kms2s,peabd,pecc,peasg,total"; }

namespace {
std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}
}  // namespace

std::string trace_line(const TraceRow& row) {
    std::string line = std::to_string(row.step) + "," + fmt(row.lr);
    for (Objective o : kAllObjectives) {
        line += ",";
        if (auto v = row.losses.get(o)) line += fmt(*v);
    }
    line += "," + fmt(row.losses.total);
    return line;
}

void write_trace(const std::filesystem::path& path, const std::vector<TraceRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write loss trace " + path.string());
    out << trace_header() << '\n';
    for (const auto& r : rows) out << trace_line(r) << '\n';
}

std::string objectives_to_string(const ObjectiveSet& objectives) {
    std::string s;
    for (Objective o : kAllObjectives) {
        if (!objectives.count(o)) continue;
        if (!s.empty()) s += ",";
        s += objective_name(o);
    }
    return s;
}

ObjectiveSet objectives_from_string(const std::string& csv) {
    ObjectiveSet out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.insert(parse_objective(item));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pre-training loop
// ---------------------------------------------------------------------------

PretrainResult pretrain(const Corpus& corpus, const Vocab& vocab, const PretrainConfig& config,
                        const std::function<void(const TraceRow&)>& on_step) {
    config.model.validate();
    config.schedule.validate();
    if (config.objectives.empty()) throw std::invalid_argument("pretrain: no objective enabled");
    if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
    if (config.accum_steps == 0) throw std::invalid_argument("pretrain: accum_steps must be >= 1");
    if (vocab.size() > config.model.vocab_size) {
        throw std::invalid_argument("pretrain: vocabulary of " + std::to_string(vocab.size()) +
                                    " tokens exceeds model vocab_size " + std::to_string(config.model.vocab_size));
    }

    std::vector<FlatDocument> docs;
    std::size_t skipped = 0;
    for (const auto& doc : corpus) {
        if (doc.category < 0 || static_cast<std::size_t>(doc.category) >= config.model.n_categories) {
            throw std::invalid_argument("pretrain: document '" + doc.id + "' category " +
                                        std::to_string(doc.category) + " outside n_categories");
        }
        std::size_t len = 1;
        for (const auto& a : doc.aspects) len += a.description.size();
        if (len > config.model.max_len) {
            ++skipped;
            continue;
        }
        docs.push_back(flatten(doc, vocab, config.model.max_len));
    }
    if (docs.empty()) throw std::invalid_argument("pretrain: every document exceeds max_len");

    TransformerModel model(config.model, config.seed, config.init, Precision::f32);
    model.set_training(true);
    const NamedTensors params = model.parameters();
    OptimizerState state;
    state.hyper = config.adam;

    std::mt19937_64 order_rng(config.seed ^ 0x243f6a8885a308d3ULL);
    std::mt19937_64 instance_rng(config.seed ^ 0x13198a2e03707344ULL);
    std::vector<std::size_t> order(docs.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    std::size_t cursor = 0;

    std::vector<TraceRow> trace;
    trace.reserve(config.schedule.total_steps);
    const double inv_accum = 1.0 / static_cast<double>(config.accum_steps);
    for (std::size_t k = 1; k <= config.schedule.total_steps; ++k) {
        zero_grads(params);
        TraceRow row;
        row.step = k - 1;
        row.losses.enabled = config.objectives;
        for (std::size_t micro = 0; micro < config.accum_steps; ++micro) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), order_rng);
                cursor = 0;
            }
            const FlatDocument& flat = docs[order[cursor++]];
            const JointInstances inst = build_joint_instances(flat, vocab.size(), instance_rng);
            LossBreakdown b = joint_loss(model, inst, config.objectives);
            if (!std::isfinite(b.total)) {
                Tape::current().clear();
                throw NonFiniteLoss(row.step, "non-finite loss at step " + std::to_string(row.step));
            }
            backward(ops::scale(b.total_tensor, inv_accum));
            for (Objective o : kAllObjectives) {
                if (!b.get(o)) continue;
                std::optional<double>& slot = row.losses.slot(o);
                slot = slot.value_or(0.0) + *b.get(o) * inv_accum;
            }
        }
        row.losses.total = 0.0;
        for (Objective o : kAllObjectives) row.losses.total += row.losses.get(o).value_or(0.0);
        for (const auto& [name, p] : params) {
            for (double g : p.grad()) {
                if (!std::isfinite(g)) {
                    throw NonFiniteLoss(row.step, "non-finite gradient in " + name + " at step " +
                                                      std::to_string(row.step));
                }
            }
        }
        row.lr = lr_at(k, config.schedule, config.adam.peak_lr);
        adam_step(params, state, row.lr);
        if (on_step) on_step(row);
        trace.push_back(std::move(row));
    }
    model.set_training(false);

    std::map<std::string, std::string> meta = {{"objectives", objectives_to_string(config.objectives)},
                                               {"task", "pretrain"}};
    Checkpoint ckpt = make_checkpoint(model, &state, &instance_rng, config.schedule.total_steps, std::move(meta));
    return PretrainResult{std::move(model), std::move(ckpt), std::move(trace), skipped};
}

PretrainEval evaluate_pretraining(TransformerModel& model, const Corpus& corpus, const Vocab& vocab,
                                  const ObjectiveSet& objectives, std::uint64_t seed, std::size_t draws) {
    if (objectives.empty()) throw std::invalid_argument("evaluate_pretraining: no objective enabled");
    if (draws == 0) throw std::invalid_argument("evaluate_pretraining: draws must be >= 1");
    const bool was_training = model.training();
    model.set_training(false);
    NoGradGuard no_grad;
    std::mt19937_64 rng(seed ^ 0x13198a2e03707344ULL);
    PretrainEval ev;
    ev.mean.enabled = objectives;
    std::size_t correct = 0;
    for (const auto& doc : corpus) {
        std::size_t len = 1;
        for (const auto& a : doc.aspects) len += a.description.size();
        if (len > model.config().max_len) continue;
        const FlatDocument flat = flatten(doc, vocab, model.config().max_len);
        double doc_total = 0.0;
        for (std::size_t d = 0; d < draws; ++d) {
            const JointInstances inst = build_joint_instances(flat, vocab.size(), rng);
            const LossBreakdown b = joint_loss(model, inst, objectives);
            for (Objective o : kAllObjectives) {
                if (!b.get(o)) continue;
                std::optional<double>& slot = ev.mean.slot(o);
                slot = slot.value_or(0.0) + *b.get(o);
            }
            doc_total += b.total;
        }
        ev.document_totals.push_back(doc_total / static_cast<double>(draws));
        const int pred = predict_category(model, flat.tokens);
        ev.predicted_categories.push_back(pred);
        if (pred == flat.category) ++correct;
    }
    model.set_training(was_training);
    ev.n_documents = ev.document_totals.size();
    if (ev.n_documents == 0) throw std::invalid_argument("evaluate_pretraining: every document exceeds max_len");
    const double n = static_cast<double>(ev.n_documents * draws);
    ev.mean.total = 0.0;
    for (Objective o : kAllObjectives) {
        std::optional<double>& slot = ev.mean.slot(o);
        if (!slot) continue;
        *slot /= n;
        ev.mean.total += *slot;
    }
    ev.pecc_accuracy = static_cast<double>(correct) / static_cast<double>(ev.n_documents);
    return ev;
}

}  // namespace kpt
