#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "test_util.hpp"

using namespace dast;
using namespace dast::trainer;
using ad::ParamSet;
using ad::Tensor;
using ad::Var;

namespace {

// L(m) = (m - 2)^2 on a single scalar parameter; no teacher.
struct QuadraticTask {
  maml::Objective support(const ParamSet& m, const ParamSet&) const { return loss(m); }
  maml::Objective query(const ParamSet& m, const ParamSet&) const { return loss(m); }
  static maml::Objective loss(const ParamSet& m) {
    const Var d = ad::sub(m["m"], Var::constant(Tensor::scalar(2.0)));
    return {ad::mul(d, d), {}};
  }
};
static_assert(maml::MetaTask<QuadraticTask>);

ParamSet scalar_param(double v) {
  ParamSet p;
  p.add("m", Tensor::scalar(v));
  return p;
}

double meta_oracle(bool second_order) {
  ParamSet m = scalar_param(0.0), t;
  std::vector<QuadraticTask> tasks(1);
  maml::MetaConfig cfg;
  cfg.inner_lr = 0.1;
  cfg.second_order = second_order;
  cfg.clip_norm = 0.0;
  optim::Optimizer sgd(optim::Kind::sgd, 0.1);
  maml::meta_step(m, t, tasks, cfg, &sgd, nullptr);
  return m["m"].item();
}

struct World {
  corpus::Corpus corpus;
  corpus::Vocab vocab;
  std::string target;

  explicit World(std::uint64_t seed = 11, std::size_t domains = 3, std::size_t dialogs = 6)
      : corpus(corpus::synth_corpus(testutil::small_synth(seed, domains, dialogs))),
        vocab(corpus::build_vocab(corpus)),
        target(corpus.domains.back().name) {}
};

bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
  if (a.names() != b.names()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a.at(i).value() == b.at(i).value())) return false;
  return true;
}

std::vector<double> losses_of(const std::vector<TracePoint>& trace) {
  std::vector<double> out;
  for (const auto& p : trace) out.push_back(p.loss);
  return out;
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Sum of query objectives after the inner step, the quantity a meta step moves.
double meta_objective(const std::vector<DialogTask>& tasks, const ParamSet& m, const ParamSet& t,
                      const maml::MetaConfig& cfg, bool with_reg) {
  double total = 0;
  for (const auto& task : tasks) {
    const auto sup = task.support(m, t);
    const ParamSet fast = maml::inner_update(m, sup.loss, cfg.inner_lr, false);
    const auto q = task.query(fast, t);
    total += q.loss.item();
    if (with_reg && q.weight_reg.defined()) total += cfg.reg * q.weight_reg.item();
  }
  return total;
}

}  // namespace

TEST(InnerUpdate, ScalarOracle) {
  for (bool second : {false, true}) {
    const ParamSet m = scalar_param(0.0);
    const ParamSet fast = maml::inner_update(m, QuadraticTask::loss(m).loss, 0.1, second);
    EXPECT_NEAR(fast["m"].item(), 0.4, 1e-12);
    EXPECT_EQ(m["m"].item(), 0.0);
  }
}

TEST(InnerUpdate, ZeroStepIsIdentity) {
  Rng rng(1);
  ParamSet m;
  m.add("a", testutil::random_tensor(3, 4, rng));
  const Var loss = ad::sum(ad::mul(m["a"], m["a"]));
  EXPECT_TRUE(bitwise_equal(maml::inner_update(m, loss, 0.0, false), m));
}

TEST(InnerUpdate, UniformWeightsMatchPlainMean) {
  World w;
  const auto cfg = testutil::tiny_trainer();
  ParamSet m, t;
  Rng rs(0, Stream::student_init), rt(0, Stream::teacher_init);
  student::init_student(m, cfg.model, w.vocab.size(), rs);
  teacher::init_teacher(t, cfg.model, rt);
  const auto pools = build_pools(w.corpus, source_domains(w.corpus, w.target), w.vocab, cfg);
  const std::vector<const TurnExample*> batch{&pools[0].train[0], &pools[0].train[1]};
  const auto uniform = batch_objective(batch, m, t, TeacherMode::uniform, nullptr, cfg.model);
  const auto plain = batch_objective(batch, m, t, TeacherMode::off, nullptr, cfg.model);
  EXPECT_EQ(uniform.loss.item(), plain.loss.item());
  EXPECT_TRUE(bitwise_equal(maml::inner_update(m, uniform.loss, 0.005, false),
                            maml::inner_update(m, plain.loss, 0.005, false)));
}

TEST(MetaStep, FirstOrderScalarOracle) { EXPECT_NEAR(meta_oracle(false), 0.32, 1e-12); }

TEST(MetaStep, SecondOrderScalarOracle) { EXPECT_NEAR(meta_oracle(true), 0.256, 1e-12); }

TEST(MetaStep, ZeroTeacherRateLeavesTeacherAndObjective) {
  World w;
  auto cfg = testutil::tiny_trainer();
  cfg.teacher_output_init = 0.5;
  ParamSet m, t;
  Rng rs(0, Stream::student_init), rt(0, Stream::teacher_init);
  student::init_student(m, cfg.model, w.vocab.size(), rs);
  teacher::init_teacher(t, cfg.model, rt, cfg.teacher_output_init);
  const auto pools = build_pools(w.corpus, source_domains(w.corpus, w.target), w.vocab, cfg);
  const auto view = teacher::encoder_view(m);
  std::vector<DialogTask> tasks;
  for (const auto& p : pools)
    tasks.emplace_back(std::vector{&p.train[0]}, std::vector{&p.train[1]}, TeacherMode::on, &view, &cfg.model);
  maml::MetaConfig mc;
  mc.update_student = false;
  const ParamSet before = t.clone();
  const double obj = meta_objective(tasks, m, t, mc, true);
  optim::Optimizer zero(optim::Kind::sgd, 0.0);
  maml::meta_step(m, t, tasks, mc, nullptr, &zero);
  EXPECT_TRUE(bitwise_equal(t, before));
  EXPECT_EQ(meta_objective(tasks, m, t, mc, true), obj);
}

TEST(MetaStep, AdversarialSignsOverSeeds) {
  World w;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto cfg = testutil::tiny_trainer(seed);
    cfg.teacher_output_init = 0.5;
    ParamSet m, t;
    Rng rs(seed, Stream::student_init), rt(seed, Stream::teacher_init);
    student::init_student(m, cfg.model, w.vocab.size(), rs);
    teacher::init_teacher(t, cfg.model, rt, cfg.teacher_output_init);
    const auto pools = build_pools(w.corpus, source_domains(w.corpus, w.target), w.vocab, cfg);
    Rng br(seed, Stream::batches);
    const auto view = teacher::encoder_view(m);
    std::vector<DialogTask> tasks;
    for (const auto& p : pools)
      tasks.emplace_back(sample_batch(p.train, 2, br), sample_batch(p.train, 2, br), TeacherMode::on, &view,
                         &cfg.model);
    maml::MetaConfig mc;
    mc.clip_norm = 0.0;

    // Student descent with the teacher frozen.
    mc.update_teacher = false;
    const double before_student = meta_objective(tasks, m, t, mc, false);
    optim::Optimizer sgd(optim::Kind::sgd, 1e-4);
    maml::meta_step(m, t, tasks, mc, &sgd, nullptr);
    EXPECT_LE(meta_objective(tasks, m, t, mc, false), before_student + 1e-9) << "seed " << seed;

    // Teacher ascent with the student frozen.
    mc.update_teacher = true;
    mc.update_student = false;
    const double before_teacher = meta_objective(tasks, m, t, mc, true);
    optim::Optimizer ascent(optim::Kind::sgd, 1e-4);
    maml::meta_step(m, t, tasks, mc, nullptr, &ascent);
    EXPECT_GE(meta_objective(tasks, m, t, mc, true), before_teacher - 1e-9) << "seed " << seed;
  }
}

TEST(MetaStep, NonFiniteGradientAborts) {
  ParamSet m = scalar_param(1e200), t;
  std::vector<QuadraticTask> tasks(1);
  optim::Optimizer sgd(optim::Kind::sgd, 0.1);
  maml::MetaConfig mc;
  mc.inner_lr = 0.1;
  EXPECT_THROW(maml::meta_step(m, t, tasks, mc, &sgd, nullptr), ad::NumericError);
  EXPECT_EQ(m["m"].item(), 1e200);
}

TEST(Schedule, Examples) {
  const auto decay = schedule_and_early_stop({1.0, 0.9, 0.91, 0.92, 0.93}, 3, 5, 0.5);
  EXPECT_EQ(decay.decays, 1u);
  EXPECT_DOUBLE_EQ(decay.lr_multiplier, 0.5);
  EXPECT_FALSE(decay.stop);
  EXPECT_EQ(decay.best, 0.9);
  // Two stale epochs are not enough.
  EXPECT_EQ(schedule_and_early_stop({1.0, 0.9, 0.91, 0.92}, 3, 5, 0.5).decays, 0u);

  const auto falling = schedule_and_early_stop({5, 4, 3, 2, 1, 0.5, 0.25}, 3, 5, 0.5);
  EXPECT_EQ(falling.decays, 0u);
  EXPECT_FALSE(falling.stop);
  EXPECT_TRUE(falling.improved_last);

  // The first epoch sets the reference; five flat epochs after it stop training.
  const auto flat = schedule_and_early_stop({1, 1, 1, 1, 1, 1}, 3, 5, 0.5);
  EXPECT_TRUE(flat.stop);
  EXPECT_EQ(flat.stale, 5u);
  EXPECT_FALSE(schedule_and_early_stop({1, 1, 1, 1, 1}, 3, 5, 0.5).stop);

  // Equal to the best is not an improvement; a new best resets the counter.
  const auto reset = schedule_and_early_stop({1, 1, 1, 0.5, 0.6}, 3, 5, 0.5);
  EXPECT_EQ(reset.stale, 1u);
  EXPECT_EQ(reset.decays, 0u);
  EXPECT_DOUBLE_EQ(schedule_and_early_stop(std::vector<double>(7, 1.0), 3, 10, 0.5).lr_multiplier, 0.25);
}

TEST(Trainer, DeterministicTrace) {
  World w;
  const auto cfg = testutil::tiny_trainer(3);
  MetaTrainer a(cfg, w.corpus, w.vocab, w.target), b(cfg, w.corpus, w.vocab, w.target);
  a.train();
  b.train();
  EXPECT_EQ(losses_of(a.state().trace), losses_of(b.state().trace));
  EXPECT_EQ(a.state().trace.size(), cfg.steps_per_epoch * cfg.max_epochs);
  EXPECT_TRUE(bitwise_equal(a.state().student, b.state().student));
  EXPECT_TRUE(a.finished());
}

TEST(Trainer, TargetDomainNeverTrainedOn) {
  World w;
  MetaTrainer t(testutil::tiny_trainer(), w.corpus, w.vocab, w.target);
  for (const auto& p : t.pools()) EXPECT_NE(p.domain, w.target);
  EXPECT_EQ(t.pools().size(), w.corpus.domains.size() - 1);
  EXPECT_THROW(source_domains(w.corpus, "nowhere"), std::invalid_argument);
}

TEST(Trainer, UniformWithoutRegIsTheBaselineBitwise) {
  World w;
  auto cfg = testutil::tiny_trainer(4);
  cfg.reg = 0.0;
  cfg.teacher = TeacherMode::uniform;
  MetaTrainer uniform(cfg, w.corpus, w.vocab, w.target);
  cfg.teacher = TeacherMode::off;
  MetaTrainer baseline(cfg, w.corpus, w.vocab, w.target);
  uniform.train();
  baseline.train();
  EXPECT_EQ(losses_of(uniform.state().trace), losses_of(baseline.state().trace));
  EXPECT_EQ(uniform.state().val_history, baseline.state().val_history);
  EXPECT_TRUE(bitwise_equal(uniform.state().student, baseline.state().student));
}

TEST(Trainer, ValidationTeacherStepFreezesStudent) {
  World w;
  auto cfg = testutil::tiny_trainer(5);
  cfg.teacher_output_init = 0.5;
  MetaTrainer t(cfg, w.corpus, w.vocab, w.target);
  t.meta_step();
  const ParamSet student = t.state().student.clone();
  const ParamSet teacher = t.state().teacher.clone();
  const double val = t.validation_loss();
  t.validation_teacher_step();
  EXPECT_TRUE(bitwise_equal(t.state().student, student));
  EXPECT_FALSE(bitwise_equal(t.state().teacher, teacher));
  EXPECT_EQ(t.validation_loss(), val);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  World w;
  testutil::TempDir dir("ckpt_bytes");
  MetaTrainer t(testutil::tiny_trainer(6), w.corpus, w.vocab, w.target);
  t.run_epoch();
  save_state(dir / "a.ckpt", t.state());
  save_state(dir / "b.ckpt", load_state(dir / "a.ckpt"));
  EXPECT_EQ(read_bytes(dir / "a.ckpt"), read_bytes(dir / "b.ckpt"));
}

TEST(Checkpoint, CorruptAndVersionErrors) {
  World w;
  testutil::TempDir dir("ckpt_bad");
  MetaTrainer t(testutil::tiny_trainer(6), w.corpus, w.vocab, w.target);
  save_state(dir / "a.ckpt", t.state());
  std::string bytes = read_bytes(dir / "a.ckpt");

  auto expect_kind = [](const std::string& b, checkpoint::CheckpointError::Kind kind) {
    try {
      checkpoint::deserialize(b);
      FAIL() << "expected CheckpointError";
    } catch (const checkpoint::CheckpointError& e) {
      EXPECT_EQ(e.kind(), kind) << e.what();
    }
  };
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x5a;
  expect_kind(flipped, checkpoint::CheckpointError::Kind::checksum);
  std::string version = bytes;
  version[8] = 9;
  expect_kind(version, checkpoint::CheckpointError::Kind::version);
  expect_kind("hello", checkpoint::CheckpointError::Kind::format);
  expect_kind(bytes.substr(0, bytes.size() / 2), checkpoint::CheckpointError::Kind::checksum);
  EXPECT_THROW(load_state(dir / "missing.ckpt"), checkpoint::CheckpointError);
}

TEST(Checkpoint, ResumeReproducesUninterruptedTrace) {
  World w;
  testutil::TempDir dir("ckpt_resume");
  auto cfg = testutil::tiny_trainer(7);
  cfg.max_epochs = 3;
  cfg.teacher_output_init = 0.3;

  MetaTrainer full(cfg, w.corpus, w.vocab, w.target);
  full.train();

  MetaTrainer first(cfg, w.corpus, w.vocab, w.target);
  first.run_epoch();
  save_state(dir / "mid.ckpt", first.state());
  MetaTrainer resumed(load_state(dir / "mid.ckpt"), w.corpus, w.vocab);
  resumed.train();

  EXPECT_EQ(losses_of(resumed.state().trace), losses_of(full.state().trace));
  EXPECT_EQ(resumed.state().val_history, full.state().val_history);
  EXPECT_TRUE(bitwise_equal(resumed.state().student, full.state().student));
  EXPECT_TRUE(bitwise_equal(resumed.state().teacher, full.state().teacher));
}

TEST(Checkpoint, ResumeRejectsDifferentVocabulary) {
  World w;
  MetaTrainer t(testutil::tiny_trainer(), w.corpus, w.vocab, w.target);
  World other(99);
  EXPECT_THROW(MetaTrainer(t.state(), other.corpus, other.vocab), std::invalid_argument);
}

TEST(Checkpoint, ModelFileRoundTrip) {
  World w;
  testutil::TempDir dir("model");
  MetaTrainer t(testutil::tiny_trainer(8), w.corpus, w.vocab, w.target);
  t.train();
  save_state(dir / "state.ckpt", t.state());
  const ModelCheckpoint from_state = load_model(dir / "state.ckpt");
  EXPECT_EQ(from_state.kind, "meta");
  EXPECT_TRUE(bitwise_equal(from_state.student, t.state().best_student));

  ModelCheckpoint m{"adapted", t.state().config, w.vocab.tokens(), w.target, 3, {1, 2}, t.state().student, t.state().teacher};
  save_model(dir / "m.ckpt", m);
  const auto back = load_model(dir / "m.ckpt");
  EXPECT_EQ(back.kind, "adapted");
  EXPECT_EQ(back.run, 3u);
  EXPECT_EQ(back.adapt_dialogs, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(to_json(back.config), to_json(m.config));
  EXPECT_TRUE(bitwise_equal(back.student, m.student));
}

TEST(Adaptation, ZeroStepsReturnsTheModel) {
  World w;
  auto cfg = testutil::tiny_trainer(9);
  MetaTrainer t(cfg, w.corpus, w.vocab, w.target);
  const auto split = target_split(w.corpus, w.target, 2, cfg.seed, 0);
  const auto adapt = examples_of(w.corpus, split.adapt, w.vocab, cfg.model);
  cfg.adapt_steps = 0;
  const auto r = adapt_to_domain(t.state().student, t.state().teacher, adapt, cfg, 0);
  EXPECT_TRUE(bitwise_equal(r.student, t.state().student));
  EXPECT_EQ(r.steps_run, 0u);
}

TEST(Adaptation, LossDecreasesOnToyDomain) {
  World w(12, 3, 12);
  auto cfg = testutil::tiny_trainer(10);
  cfg.adapt_steps = 50;
  cfg.adapt_lr = 0.02;
  cfg.adapt_eval_every = 5;
  cfg.adapt_patience = 10;
  MetaTrainer t(cfg, w.corpus, w.vocab, w.target);
  const auto split = target_split(w.corpus, w.target, 3, cfg.seed, 0);
  EXPECT_EQ(split.adapt.size() + split.test.size(), 12u);
  const auto adapt = examples_of(w.corpus, split.adapt, w.vocab, cfg.model);
  const auto r = adapt_to_domain(t.state().student, t.state().teacher, adapt, cfg, 0);
  EXPECT_LT(mean_unweighted_loss(adapt, r.student), r.eval_losses.front());
  EXPECT_GT(r.best_step, 0u);
}

TEST(Adaptation, UniformAblationMatchesPlainFineTuning) {
  World w;
  auto cfg = testutil::tiny_trainer(11);
  MetaTrainer t(cfg, w.corpus, w.vocab, w.target);
  const auto split = target_split(w.corpus, w.target, 2, cfg.seed, 1);
  const auto adapt = examples_of(w.corpus, split.adapt, w.vocab, cfg.model);
  cfg.teacher = TeacherMode::uniform;
  const auto u = adapt_to_domain(t.state().student, t.state().teacher, adapt, cfg, 1);
  cfg.teacher = TeacherMode::off;
  const auto o = adapt_to_domain(t.state().student, t.state().teacher, adapt, cfg, 1);
  EXPECT_EQ(u.eval_losses, o.eval_losses);
  EXPECT_TRUE(bitwise_equal(u.student, o.student));
}

TEST(Adaptation, TargetSplitValidation) {
  World w;
  EXPECT_THROW(target_split(w.corpus, w.target, 7, 0, 0), std::invalid_argument);
  const auto a = target_split(w.corpus, w.target, 2, 0, 0);
  const auto b = target_split(w.corpus, w.target, 2, 0, 0);
  EXPECT_EQ(a.adapt, b.adapt);
  for (std::size_t i : a.adapt) EXPECT_EQ(w.corpus.dialogs[i].domain, w.target);
}

TEST(Config, JsonRoundTripAndErrors) {
  TrainerConfig c = testutil::tiny_trainer(5);
  c.teacher = TeacherMode::uniform;
  c.second_order = true;
  const auto j = to_json(c);
  EXPECT_EQ(to_json(trainer_config_from_json(j)), j);

  const auto partial = trainer_config_from_json(corpus::ordered_json{{"reg", 0.5}, {"model", {{"hidden", 10}}}}, c);
  EXPECT_EQ(partial.reg, 0.5);
  EXPECT_EQ(partial.model.hidden, 10u);
  EXPECT_EQ(partial.model.embed, c.model.embed);
  EXPECT_EQ(partial.batch_size, c.batch_size);

  EXPECT_THROW(trainer_config_from_json(corpus::ordered_json{{"learning_rate", 1}}), ConfigError);
  EXPECT_THROW(trainer_config_from_json(corpus::ordered_json{{"reg", "high"}}), ConfigError);
  EXPECT_THROW(trainer_config_from_json(corpus::ordered_json{{"teacher", "sometimes"}}), std::invalid_argument);

  TrainerConfig bad = c;
  bad.inner_lr = 0;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = c;
  bad.decay_patience = 0;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = c;
  bad.model.hidden = 7;
  EXPECT_THROW(validate(bad), ConfigError);
}

TEST(Config, Defaults) {
  const TrainerConfig d;
  EXPECT_EQ(d.inner_lr, 0.005);
  EXPECT_EQ(d.meta_lr, 0.005);
  EXPECT_EQ(d.teacher_lr, 0.005);
  EXPECT_EQ(d.reg, 0.01);
  EXPECT_EQ(d.batch_size, 32u);
  EXPECT_EQ(d.decay_factor, 0.5);
  EXPECT_EQ(d.decay_patience, 3u);
  EXPECT_EQ(d.stop_patience, 5u);
  EXPECT_EQ(d.adapt_dialogs, 9u);
  EXPECT_EQ(d.model.embed, 50u);
  EXPECT_EQ(d.model.hidden, 100u);
  EXPECT_EQ(d.model.heads, 5u);
  EXPECT_EQ(d.model.teacher_layers, 2u);
  EXPECT_NO_THROW(validate(d));
}
