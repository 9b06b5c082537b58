// Meta-training over source domains, validation-stage teacher updates, the
// learning-rate schedule, resumable training state and target adaptation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dast/autodiff.hpp"
#include "dast/checkpoint.hpp"
#include "dast/corpus.hpp"
#include "dast/maml.hpp"
#include "dast/optim.hpp"
#include "dast/rng.hpp"
#include "dast/student.hpp"
#include "dast/teacher.hpp"

namespace dast {

// on: learned weights. uniform: weights fixed at 1/n, teacher idle.
// off: teacher absent (plain MAML baseline).
enum class TeacherMode { on, off, uniform };

inline TeacherMode teacher_mode_from_string(const std::string& s) {
  if (s == "on") return TeacherMode::on;
  if (s == "off") return TeacherMode::off;
  if (s == "uniform") return TeacherMode::uniform;
  throw std::invalid_argument("unknown teacher mode '" + s + "' (expected on, off or uniform)");
}

inline std::string to_string(TeacherMode m) {
  switch (m) {
    case TeacherMode::on: return "on";
    case TeacherMode::off: return "off";
    default: return "uniform";
  }
}

struct TrainerConfig {
  double inner_lr{0.005};
  double meta_lr{0.005};
  double teacher_lr{0.005};
  double reg{0.01};
  std::size_t batch_size{32};
  double decay_factor{0.5};
  std::size_t decay_patience{3};
  std::size_t stop_patience{5};
  bool second_order{false};
  std::size_t domains_per_step{0};  // 0 = every source domain
  bool reuse_batch{false};
  std::string optimizer{"adam"};
  double clip_norm{5.0};
  TeacherMode teacher{TeacherMode::on};
  double teacher_output_init{0.0};
  std::size_t steps_per_epoch{50};
  std::size_t max_epochs{30};
  double val_fraction{0.1};
  std::size_t val_teacher_steps{1};
  std::size_t adapt_steps{50};
  double adapt_lr{0.005};
  std::string adapt_optimizer{"adam"};
  std::size_t adapt_batch_size{8};
  std::size_t adapt_eval_every{5};
  std::size_t adapt_patience{4};
  std::size_t adapt_dialogs{9};
  std::uint64_t seed{0};
  ModelConfig model;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void validate(const TrainerConfig& c) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(c.inner_lr > 0 && c.meta_lr > 0 && c.teacher_lr > 0, "learning rates must be positive");
  require(c.reg >= 0, "reg must be non-negative");
  require(c.batch_size >= 1 && c.adapt_batch_size >= 1, "batch sizes must be positive");
  require(c.decay_patience >= 1 && c.stop_patience >= 1, "patience must be >= 1");
  require(c.decay_factor > 0 && c.decay_factor <= 1, "decay_factor must lie in (0, 1]");
  require(c.steps_per_epoch >= 1, "steps_per_epoch must be >= 1");
  require(c.val_fraction >= 0 && c.val_fraction < 1, "val_fraction must lie in [0, 1)");
  require(c.adapt_eval_every >= 1 && c.adapt_patience >= 1, "adaptation patience must be >= 1");
  require(c.adapt_lr > 0, "adapt_lr must be positive");
  require(c.model.embed >= 1 && c.model.hidden >= 1 && c.model.heads >= 1, "model sizes must be positive");
  require(c.model.hidden % c.model.heads == 0, "hidden size must be divisible by heads");
  optim::kind_from_string(c.optimizer);
  optim::kind_from_string(c.adapt_optimizer);
}

inline corpus::ordered_json to_json(const ModelConfig& m) {
  return {{"embed", m.embed},
          {"hidden", m.hidden},
          {"heads", m.heads},
          {"teacher_layers", m.teacher_layers},
          {"max_belief", m.max_belief},
          {"max_act", m.max_act},
          {"max_response", m.max_response},
          {"pre_softmax_norm", m.pre_softmax_norm},
          {"full_history", m.full_history},
          {"bucket_edges", m.bucket_edges}};
}

inline corpus::ordered_json to_json(const TrainerConfig& c) {
  return {{"inner_lr", c.inner_lr},
          {"meta_lr", c.meta_lr},
          {"teacher_lr", c.teacher_lr},
          {"reg", c.reg},
          {"batch_size", c.batch_size},
          {"decay_factor", c.decay_factor},
          {"decay_patience", c.decay_patience},
          {"stop_patience", c.stop_patience},
          {"second_order", c.second_order},
          {"domains_per_step", c.domains_per_step},
          {"reuse_batch", c.reuse_batch},
          {"optimizer", c.optimizer},
          {"clip_norm", c.clip_norm},
          {"teacher", to_string(c.teacher)},
          {"teacher_output_init", c.teacher_output_init},
          {"steps_per_epoch", c.steps_per_epoch},
          {"max_epochs", c.max_epochs},
          {"val_fraction", c.val_fraction},
          {"val_teacher_steps", c.val_teacher_steps},
          {"adapt_steps", c.adapt_steps},
          {"adapt_lr", c.adapt_lr},
          {"adapt_optimizer", c.adapt_optimizer},
          {"adapt_batch_size", c.adapt_batch_size},
          {"adapt_eval_every", c.adapt_eval_every},
          {"adapt_patience", c.adapt_patience},
          {"adapt_dialogs", c.adapt_dialogs},
          {"seed", c.seed},
          {"model", to_json(c.model)}};
}

namespace config_detail {
template <class T>
void read(const corpus::ordered_json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "/" + key + ": wrong type");
  }
}
}  // namespace config_detail

// Fields absent from `j` keep their value in `base`; unknown fields are errors.
inline TrainerConfig trainer_config_from_json(const corpus::ordered_json& j,
                                              TrainerConfig base = {}) {
  using config_detail::read;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const corpus::ordered_json known = to_json(base);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ConfigError("unknown config field '" + it.key() + "'");
  TrainerConfig c = base;
  read(j, "inner_lr", c.inner_lr, "");
  read(j, "meta_lr", c.meta_lr, "");
  read(j, "teacher_lr", c.teacher_lr, "");
  read(j, "reg", c.reg, "");
  read(j, "batch_size", c.batch_size, "");
  read(j, "decay_factor", c.decay_factor, "");
  read(j, "decay_patience", c.decay_patience, "");
  read(j, "stop_patience", c.stop_patience, "");
  read(j, "second_order", c.second_order, "");
  read(j, "domains_per_step", c.domains_per_step, "");
  read(j, "reuse_batch", c.reuse_batch, "");
  read(j, "optimizer", c.optimizer, "");
  read(j, "clip_norm", c.clip_norm, "");
  if (j.contains("teacher")) {
    try {
      c.teacher = teacher_mode_from_string(j["teacher"].get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("/teacher: ") + e.what());
    }
  }
  read(j, "teacher_output_init", c.teacher_output_init, "");
  read(j, "steps_per_epoch", c.steps_per_epoch, "");
  read(j, "max_epochs", c.max_epochs, "");
  read(j, "val_fraction", c.val_fraction, "");
  read(j, "val_teacher_steps", c.val_teacher_steps, "");
  read(j, "adapt_steps", c.adapt_steps, "");
  read(j, "adapt_lr", c.adapt_lr, "");
  read(j, "adapt_optimizer", c.adapt_optimizer, "");
  read(j, "adapt_batch_size", c.adapt_batch_size, "");
  read(j, "adapt_eval_every", c.adapt_eval_every, "");
  read(j, "adapt_patience", c.adapt_patience, "");
  read(j, "adapt_dialogs", c.adapt_dialogs, "");
  read(j, "seed", c.seed, "");
  if (j.contains("model")) {
    const auto& m = j["model"];
    if (!m.is_object()) throw ConfigError("/model must be an object");
    const corpus::ordered_json mk = to_json(base.model);
    for (auto it = m.begin(); it != m.end(); ++it)
      if (!mk.contains(it.key())) throw ConfigError("unknown config field 'model/" + it.key() + "'");
    read(m, "embed", c.model.embed, "/model");
    read(m, "hidden", c.model.hidden, "/model");
    read(m, "heads", c.model.heads, "/model");
    read(m, "teacher_layers", c.model.teacher_layers, "/model");
    read(m, "max_belief", c.model.max_belief, "/model");
    read(m, "max_act", c.model.max_act, "/model");
    read(m, "max_response", c.model.max_response, "/model");
    read(m, "pre_softmax_norm", c.model.pre_softmax_norm, "/model");
    read(m, "full_history", c.model.full_history, "/model");
    read(m, "bucket_edges", c.model.bucket_edges, "/model");
  }
  return c;
}

namespace trainer {

using ad::ParamSet;
using ad::Tensor;
using ad::Var;

// ---------------------------------------------------------------- data

struct DomainPool {
  std::string domain;
  std::vector<std::size_t> train_dialogs, val_dialogs;
  std::vector<TurnExample> train, val;
};

inline std::vector<TurnExample> examples_of(const corpus::Corpus& c,
                                            const std::vector<std::size_t>& dialogs,
                                            const corpus::Vocab& vocab, const ModelConfig& cfg) {
  std::vector<TurnExample> out;
  for (std::size_t i : dialogs) {
    const auto& d = c.dialogs.at(i);
    auto ex = make_examples(d, c.schema(d.domain), vocab, cfg);
    out.insert(out.end(), std::make_move_iterator(ex.begin()), std::make_move_iterator(ex.end()));
  }
  return out;
}

// Source domains are every domain except the target, in schema order.
inline std::vector<std::string> source_domains(const corpus::Corpus& c, const std::string& target) {
  if (!c.has_domain(target)) throw std::invalid_argument("unknown target domain '" + target + "'");
  std::vector<std::string> out;
  for (const auto& d : c.domains)
    if (d.name != target && !c.dialogs_in(d.name).empty()) out.push_back(d.name);
  if (out.empty()) throw std::invalid_argument("no source domains besides '" + target + "'");
  return out;
}

inline std::vector<DomainPool> build_pools(const corpus::Corpus& c,
                                           const std::vector<std::string>& domains,
                                           const corpus::Vocab& vocab, const TrainerConfig& cfg) {
  std::vector<DomainPool> pools;
  for (const auto& name : domains) {
    const auto items = c.dialogs_in(name);
    const auto n_val = static_cast<std::size_t>(
        std::floor(cfg.val_fraction * static_cast<double>(items.size())));
    const auto split = corpus::split_corpus(items, {0, n_val, false}, cfg.seed);
    DomainPool p{name, split.train, split.val, {}, {}};
    p.train = examples_of(c, split.train, vocab, cfg.model);
    p.val = examples_of(c, split.val, vocab, cfg.model);
    if (p.train.empty()) throw std::invalid_argument("domain '" + name + "' has no training turns");
    pools.push_back(std::move(p));
  }
  return pools;
}

struct TargetSplit {
  std::vector<std::size_t> adapt, test;
};

// Run `run` draws its own adaptation sample; everything else is test data.
inline TargetSplit target_split(const corpus::Corpus& c, const std::string& target,
                                std::size_t adapt_dialogs, std::uint64_t seed, std::uint64_t run) {
  const auto items = c.dialogs_in(target);
  if (adapt_dialogs > items.size())
    throw std::invalid_argument("adapt-dialogs " + std::to_string(adapt_dialogs) + " exceeds the " +
                                std::to_string(items.size()) + " dialogs of domain '" + target + "'");
  const auto s = corpus::split_corpus(items, {adapt_dialogs, 0, true}, seed, run);
  return {s.adapt, s.test};
}

// ---------------------------------------------------------------- losses

struct BatchObjective {
  Var loss;  // mean weighted turn loss
  Var reg;   // mean squared norm of the weights (undefined without teacher)
};

// Weights for one example. Undefined means the student's uniform default.
inline Var example_weights(const TurnExample& ex, TeacherMode mode,
                           const teacher::EncoderView* view, const teacher::TeacherRef* t) {
  if (mode == TeacherMode::off) return {};
  const std::size_t n = ex.response.size() + 1;
  if (mode == TeacherMode::uniform) return student::uniform_weights(n);
  return teacher::teacher_weights(ex.context, with_eos(ex.response), view->ref, *t);
}

inline BatchObjective batch_objective(const std::vector<const TurnExample*>& batch,
                                      const ParamSet& student_params, const ParamSet& teacher_params,
                                      TeacherMode mode, const teacher::EncoderView* view,
                                      const ModelConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const auto s = student::StudentRef::bind(student_params);
  std::optional<teacher::TeacherRef> t;
  if (mode == TeacherMode::on) t = teacher::TeacherRef::bind(teacher_params, cfg);
  Var loss, reg;
  for (const TurnExample* ex : batch) {
    const Var w = example_weights(*ex, mode, view, t ? &*t : nullptr);
    const Var l = student::student_turn_loss(*ex, s, w).total;
    loss = loss.defined() ? ad::add(loss, l) : l;
    if (w.defined()) {
      const Var r = teacher::weight_regularizer(w);
      reg = reg.defined() ? ad::add(reg, r) : r;
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  BatchObjective out{ad::scale(loss, inv), {}};
  if (reg.defined()) out.reg = ad::scale(reg, inv);
  return out;
}

// Plain teacher-forced loss with uniform weights, no graph.
inline double mean_unweighted_loss(const std::vector<TurnExample>& examples,
                                   const ParamSet& student_params) {
  if (examples.empty()) return std::numeric_limits<double>::quiet_NaN();
  ad::NoGradGuard no_grad;
  const auto s = student::StudentRef::bind(student_params);
  double sum = 0.0;
  for (const auto& ex : examples) sum += student::student_turn_loss(ex, s).total.item();
  return sum / static_cast<double>(examples.size());
}

// One source domain's support and query batches within a meta step.
class DialogTask {
 public:
  DialogTask(std::vector<const TurnExample*> support, std::vector<const TurnExample*> query,
             TeacherMode mode, const teacher::EncoderView* view, const ModelConfig* cfg)
      : support_(std::move(support)), query_(std::move(query)), mode_(mode), view_(view), cfg_(cfg) {}

  maml::Objective support(const ParamSet& m, const ParamSet& t) const { return run(support_, m, t); }
  maml::Objective query(const ParamSet& m, const ParamSet& t) const { return run(query_, m, t); }

 private:
  maml::Objective run(const std::vector<const TurnExample*>& batch, const ParamSet& m,
                      const ParamSet& t) const {
    const auto b = batch_objective(batch, m, t, mode_, view_, *cfg_);
    return {b.loss, b.reg};
  }
  std::vector<const TurnExample*> support_, query_;
  TeacherMode mode_;
  const teacher::EncoderView* view_;
  const ModelConfig* cfg_;
};
static_assert(maml::MetaTask<DialogTask>);

inline std::vector<const TurnExample*> sample_batch(const std::vector<TurnExample>& pool,
                                                    std::size_t n, Rng& rng) {
  std::vector<const TurnExample*> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(&pool[rng.index(pool.size())]);
  return out;
}

// ---------------------------------------------------------------- schedule

struct Schedule {
  double lr_multiplier{1.0};
  std::size_t decays{0};
  std::size_t stale{0};  // consecutive epochs without a new best
  bool stop{false};
  bool improved_last{false};
  double best{std::numeric_limits<double>::infinity()};
};

// Replays the whole validation history: an epoch improves only when strictly
// below the best so far; every `decay_patience` stale epochs in a row multiply
// the rates by `factor`; `stop_patience` stale epochs stop training.
inline Schedule schedule_and_early_stop(const std::vector<double>& history,
                                        std::size_t decay_patience, std::size_t stop_patience,
                                        double factor) {
  Schedule s;
  for (double v : history) {
    s.improved_last = v < s.best;
    if (s.improved_last) {
      s.best = v;
      s.stale = 0;
      continue;
    }
    ++s.stale;
    if (s.stale % decay_patience == 0) {
      ++s.decays;
      s.lr_multiplier *= factor;
    }
  }
  s.stop = s.stale >= stop_patience;
  return s;
}

inline Schedule schedule_and_early_stop(const std::vector<double>& history, const TrainerConfig& c) {
  return schedule_and_early_stop(history, c.decay_patience, c.stop_patience, c.decay_factor);
}

// ---------------------------------------------------------------- state

struct TracePoint {
  std::size_t epoch{0};
  std::size_t step{0};
  double loss{0.0};
  double objective{0.0};
};

struct EpochRecord {
  std::size_t epoch{0};
  double val_loss{0.0};
  double lr_multiplier{1.0};
  bool improved{false};
};

struct TrainState {
  TrainerConfig config;
  std::vector<std::string> vocab;
  std::vector<std::string> sources;
  std::string target;
  std::size_t epoch{0};  // completed epochs
  std::size_t step{0};   // completed meta steps
  std::vector<double> val_history;
  std::vector<TracePoint> trace;
  std::string rng_state;
  ParamSet student, teacher;
  optim::Optimizer student_opt, teacher_opt;
  ParamSet best_student, best_teacher;
  bool finished{false};
};

// ---------------------------------------------------------------- trainer

class MetaTrainer {
 public:
  using EpochCallback = std::function<void(const MetaTrainer&, const EpochRecord&)>;

  // Fresh run: parameters initialized from the config seed.
  MetaTrainer(const TrainerConfig& cfg, const corpus::Corpus& c, const corpus::Vocab& vocab,
              const std::string& target)
      : corpus_(c), vocab_(vocab) {
    validate(cfg);
    state_.config = cfg;
    state_.vocab = vocab.tokens();
    state_.target = target;
    state_.sources = source_domains(c, target);
    Rng rs(cfg.seed, Stream::student_init), rt(cfg.seed, Stream::teacher_init);
    student::init_student(state_.student, cfg.model, vocab.size(), rs);
    teacher::init_teacher(state_.teacher, cfg.model, rt, cfg.teacher_output_init);
    state_.student_opt = optim::Optimizer(optim::kind_from_string(cfg.optimizer), cfg.meta_lr);
    state_.teacher_opt = optim::Optimizer(optim::kind_from_string(cfg.optimizer), cfg.teacher_lr);
    rng_ = Rng(cfg.seed, Stream::batches);
    state_.best_student = state_.student.clone();
    state_.best_teacher = state_.teacher.clone();
    prepare();
  }

  // Resumed run.
  MetaTrainer(TrainState state, const corpus::Corpus& c, const corpus::Vocab& vocab)
      : corpus_(c), vocab_(vocab), state_(std::move(state)) {
    validate(state_.config);
    if (state_.vocab != vocab.tokens())
      throw std::invalid_argument("checkpoint vocabulary does not match the corpus vocabulary");
    if (source_domains(c, state_.target) != state_.sources)
      throw std::invalid_argument("checkpoint source domains do not match the corpus");
    rng_.restore(state_.rng_state);
    prepare();
  }

  const TrainState& state() const { return state_; }
  TrainState& mutable_state() { return state_; }
  const std::vector<DomainPool>& pools() const { return pools_; }
  bool finished() const { return state_.finished; }

  // One adversarial meta step over the sampled source domains.
  maml::StepResult meta_step() {
    const TrainerConfig& c = state_.config;
    std::vector<std::size_t> chosen(pools_.size());
    for (std::size_t i = 0; i < chosen.size(); ++i) chosen[i] = i;
    if (c.domains_per_step > 0 && c.domains_per_step < chosen.size()) {
      rng_.shuffle(chosen);
      chosen.resize(c.domains_per_step);
      std::sort(chosen.begin(), chosen.end());
    }
    const auto view = teacher::encoder_view(state_.student);
    std::vector<DialogTask> tasks;
    for (std::size_t k : chosen) {
      auto support = sample_batch(pools_[k].train, c.batch_size, rng_);
      auto query = c.reuse_batch ? support : sample_batch(pools_[k].train, c.batch_size, rng_);
      tasks.emplace_back(std::move(support), std::move(query), c.teacher, &view, &c.model);
    }
    const auto r = maml::meta_step(state_.student, state_.teacher, tasks, meta_config(true),
                                   &state_.student_opt, &state_.teacher_opt);
    ++state_.step;
    state_.trace.push_back({state_.epoch, state_.step, r.loss, r.objective});
    return r;
  }

  // Unweighted validation loss over every source domain with M frozen.
  double validation_loss() const {
    std::vector<TurnExample> all;
    for (const auto& p : pools_) all.insert(all.end(), p.val.begin(), p.val.end());
    return mean_unweighted_loss(all, state_.student);
  }

  // Teacher ascent on validation batches; the student is left untouched.
  void validation_teacher_step() {
    const TrainerConfig& c = state_.config;
    if (c.teacher != TeacherMode::on) return;
    Rng vr(c.seed, Stream::validation, state_.epoch);
    const auto view = teacher::encoder_view(state_.student);
    for (std::size_t s = 0; s < c.val_teacher_steps; ++s) {
      std::vector<DialogTask> tasks;
      for (const auto& p : pools_) {
        if (p.val.empty()) continue;
        auto support = sample_batch(p.val, c.batch_size, vr);
        auto query = c.reuse_batch ? support : sample_batch(p.val, c.batch_size, vr);
        tasks.emplace_back(std::move(support), std::move(query), c.teacher, &view, &c.model);
      }
      if (tasks.empty()) return;
      maml::meta_step(state_.student, state_.teacher, tasks, meta_config(false), nullptr,
                      &state_.teacher_opt);
    }
  }

  EpochRecord run_epoch() {
    const TrainerConfig& c = state_.config;
    for (std::size_t i = 0; i < c.steps_per_epoch; ++i) meta_step();
    const double val = validation_loss();
    validation_teacher_step();
    state_.val_history.push_back(std::isnan(val) ? state_.trace.back().loss : val);
    ++state_.epoch;
    const Schedule sch = schedule_and_early_stop(state_.val_history, c);
    state_.student_opt.set_lr_multiplier(sch.lr_multiplier);
    state_.teacher_opt.set_lr_multiplier(sch.lr_multiplier);
    if (sch.improved_last) {
      state_.best_student = state_.student.clone();
      state_.best_teacher = state_.teacher.clone();
    }
    state_.finished = sch.stop || state_.epoch >= c.max_epochs;
    state_.rng_state = rng_.state();
    return {state_.epoch, state_.val_history.back(), sch.lr_multiplier, sch.improved_last};
  }

  void train(const EpochCallback& on_epoch = {}) {
    while (!state_.finished) {
      const EpochRecord r = run_epoch();
      if (on_epoch) on_epoch(*this, r);
    }
  }

 private:
  maml::MetaConfig meta_config(bool update_student) const {
    const TrainerConfig& c = state_.config;
    maml::MetaConfig m;
    m.inner_lr = c.inner_lr;
    m.reg = c.reg;
    m.second_order = c.second_order;
    m.clip_norm = c.clip_norm;
    m.update_student = update_student;
    m.update_teacher = c.teacher == TeacherMode::on;
    return m;
  }

  void prepare() {
    pools_ = build_pools(corpus_, state_.sources, vocab_, state_.config);
    if (state_.rng_state.empty()) state_.rng_state = rng_.state();
  }

  const corpus::Corpus& corpus_;
  const corpus::Vocab& vocab_;
  TrainState state_;
  std::vector<DomainPool> pools_;
  Rng rng_;
};

// ---------------------------------------------------------------- persistence

inline corpus::ordered_json trace_json(const std::vector<TracePoint>& trace) {
  corpus::ordered_json j = corpus::ordered_json::array();
  for (const auto& p : trace) j.push_back({p.epoch, p.step, p.loss, p.objective});
  return j;
}

inline std::vector<TracePoint> trace_from_json(const corpus::ordered_json& j) {
  std::vector<TracePoint> out;
  for (const auto& p : j)
    out.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>(), p.at(2).get<double>(),
                   p.at(3).get<double>()});
  return out;
}

inline corpus::ordered_json optimizer_json(const optim::Optimizer& o) {
  return {{"kind", optim::to_string(o.kind())},
          {"lr", o.base_lr()},
          {"multiplier", o.lr_multiplier()},
          {"t", o.steps()}};
}

inline optim::Optimizer optimizer_from(const corpus::ordered_json& j, const checkpoint::Archive& a,
                                       const std::string& prefix) {
  optim::Optimizer o(optim::kind_from_string(j.at("kind").get<std::string>()), j.at("lr").get<double>());
  std::vector<Tensor> m, v;
  if (a.has_group(prefix + ".m")) {
    m = checkpoint::tensors_of(a.group(prefix + ".m"));
    v = checkpoint::tensors_of(a.group(prefix + ".v"));
  }
  o.restore(j.at("t").get<std::uint64_t>(), j.at("multiplier").get<double>(), std::move(m), std::move(v));
  return o;
}

inline checkpoint::Archive to_archive(const TrainState& s) {
  checkpoint::Archive a;
  a.meta = {{"kind", "meta"},
            {"config", to_json(s.config)},
            {"vocab", s.vocab},
            {"sources", s.sources},
            {"target", s.target},
            {"epoch", s.epoch},
            {"step", s.step},
            {"val_history", s.val_history},
            {"trace", trace_json(s.trace)},
            {"rng", s.rng_state},
            {"finished", s.finished},
            {"student_opt", optimizer_json(s.student_opt)},
            {"teacher_opt", optimizer_json(s.teacher_opt)}};
  a.add_group(checkpoint::group_of("student", s.student));
  a.add_group(checkpoint::group_of("teacher", s.teacher));
  a.add_group(checkpoint::group_of("best_student", s.best_student));
  a.add_group(checkpoint::group_of("best_teacher", s.best_teacher));
  if (!s.student_opt.first_moments().empty()) {
    a.add_group(checkpoint::group_of("student_opt.m", s.student_opt.first_moments()));
    a.add_group(checkpoint::group_of("student_opt.v", s.student_opt.second_moments()));
  }
  if (!s.teacher_opt.first_moments().empty()) {
    a.add_group(checkpoint::group_of("teacher_opt.m", s.teacher_opt.first_moments()));
    a.add_group(checkpoint::group_of("teacher_opt.v", s.teacher_opt.second_moments()));
  }
  return a;
}

inline TrainState state_from_archive(const checkpoint::Archive& a) {
  using checkpoint::CheckpointError;
  const auto& m = a.meta;
  if (m.value("kind", "") != "meta")
    throw CheckpointError(CheckpointError::Kind::mismatch, "checkpoint is not a meta-training state");
  TrainState s;
  try {
    s.config = trainer_config_from_json(m.at("config"));
    s.vocab = m.at("vocab").get<std::vector<std::string>>();
    s.sources = m.at("sources").get<std::vector<std::string>>();
    s.target = m.at("target").get<std::string>();
    s.epoch = m.at("epoch").get<std::size_t>();
    s.step = m.at("step").get<std::size_t>();
    s.val_history = m.at("val_history").get<std::vector<double>>();
    s.trace = trace_from_json(m.at("trace"));
    s.rng_state = m.at("rng").get<std::string>();
    s.finished = m.at("finished").get<bool>();
    s.student_opt = optimizer_from(m.at("student_opt"), a, "student_opt");
    s.teacher_opt = optimizer_from(m.at("teacher_opt"), a, "teacher_opt");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::format, std::string("checkpoint metadata: ") + e.what());
  }
  s.student = checkpoint::params_of(a.group("student"));
  s.teacher = checkpoint::params_of(a.group("teacher"));
  s.best_student = checkpoint::params_of(a.group("best_student"));
  s.best_teacher = checkpoint::params_of(a.group("best_teacher"));
  return s;
}

inline void save_state(const std::filesystem::path& path, const TrainState& s) {
  checkpoint::save(path, to_archive(s));
}

inline TrainState load_state(const std::filesystem::path& path) {
  return state_from_archive(checkpoint::load(path));
}

// A model ready for evaluation: student, teacher and what produced them.
struct ModelCheckpoint {
  std::string kind;  // "meta" (best meta-trained model) or "adapted"
  TrainerConfig config;
  std::vector<std::string> vocab;
  std::string target;
  std::size_t run{0};
  std::vector<std::size_t> adapt_dialogs;
  ParamSet student, teacher;
};

inline void save_model(const std::filesystem::path& path, const ModelCheckpoint& m) {
  checkpoint::Archive a;
  a.meta = {{"kind", m.kind},         {"config", to_json(m.config)}, {"vocab", m.vocab},
            {"target", m.target},     {"run", m.run},                {"adapt_dialogs", m.adapt_dialogs}};
  a.add_group(checkpoint::group_of("student", m.student));
  a.add_group(checkpoint::group_of("teacher", m.teacher));
  checkpoint::save(path, a);
}

// Accepts both model files and training states (which yield their best model).
inline ModelCheckpoint load_model(const std::filesystem::path& path) {
  using checkpoint::CheckpointError;
  const auto a = checkpoint::load(path);
  ModelCheckpoint m;
  try {
    m.kind = a.meta.at("kind").get<std::string>();
    m.config = trainer_config_from_json(a.meta.at("config"));
    m.vocab = a.meta.at("vocab").get<std::vector<std::string>>();
    m.target = a.meta.at("target").get<std::string>();
    if (a.meta.contains("run")) m.run = a.meta["run"].get<std::size_t>();
    if (a.meta.contains("adapt_dialogs"))
      m.adapt_dialogs = a.meta["adapt_dialogs"].get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::format, std::string("checkpoint metadata: ") + e.what());
  }
  const bool state = m.kind == "meta" && a.has_group("best_student");
  m.student = checkpoint::params_of(a.group(state ? "best_student" : "student"));
  m.teacher = checkpoint::params_of(a.group(state ? "best_teacher" : "teacher"));
  return m;
}

// ---------------------------------------------------------------- adaptation

struct AdaptResult {
  ParamSet student;
  std::vector<double> eval_losses;  // unweighted adapt-split loss per evaluation
  std::size_t best_step{0};
  std::size_t steps_run{0};
};

// Fine-tunes a copy of `student_params` on the target sample with
// teacher-weighted losses. The teacher is frozen, so weights are computed once
// from the starting model. Returns the parameters with the lowest unweighted
// adapt-split loss among evaluations every `adapt_eval_every` steps.
inline AdaptResult adapt_to_domain(const ParamSet& student_params, const ParamSet& teacher_params,
                                   const std::vector<TurnExample>& adapt, const TrainerConfig& cfg,
                                   std::uint64_t run) {
  if (adapt.empty()) throw std::invalid_argument("adaptation split has no turns");
  AdaptResult out;
  out.student = student_params.clone();
  out.eval_losses.push_back(mean_unweighted_loss(adapt, out.student));
  if (cfg.adapt_steps == 0) return out;

  std::vector<Tensor> weights;
  if (cfg.teacher != TeacherMode::off) {
    ad::NoGradGuard no_grad;
    const auto view = teacher::encoder_view(student_params);
    std::optional<teacher::TeacherRef> t;
    if (cfg.teacher == TeacherMode::on) t = teacher::TeacherRef::bind(teacher_params, cfg.model);
    for (const auto& ex : adapt)
      weights.push_back(example_weights(ex, cfg.teacher, &view, t ? &*t : nullptr).value());
  }

  optim::Optimizer opt(optim::kind_from_string(cfg.adapt_optimizer), cfg.adapt_lr);
  Rng rng(cfg.seed, Stream::adaptation, run);
  ParamSet best = out.student.clone();
  double best_loss = out.eval_losses.front();
  std::size_t stale = 0;
  for (std::size_t step = 1; step <= cfg.adapt_steps; ++step) {
    const auto s = student::StudentRef::bind(out.student);
    Var loss;
    for (std::size_t b = 0; b < cfg.adapt_batch_size; ++b) {
      const std::size_t i = rng.index(adapt.size());
      const Var w = weights.empty() ? Var{} : Var::constant(weights[i]);
      const Var l = student::student_turn_loss(adapt[i], s, w).total;
      loss = loss.defined() ? ad::add(loss, l) : l;
    }
    loss = ad::scale(loss, 1.0 / static_cast<double>(cfg.adapt_batch_size));
    auto grads = ad::gradients_for(ad::backward(loss), out.student);
    maml::detail::require_finite(grads, out.student, "adaptation");
    optim::clip_global_norm(grads, cfg.clip_norm);
    opt.step(out.student, grads);
    out.steps_run = step;
    if (step % cfg.adapt_eval_every == 0 || step == cfg.adapt_steps) {
      const double l = mean_unweighted_loss(adapt, out.student);
      out.eval_losses.push_back(l);
      if (l < best_loss) {
        best_loss = l;
        best = out.student.clone();
        out.best_step = step;
        stale = 0;
      } else if (++stale >= cfg.adapt_patience) {
        break;
      }
    }
  }
  out.student = std::move(best);
  return out;
}

}  // namespace trainer
}  // namespace dast
