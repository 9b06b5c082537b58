// dast: data generation, meta-training, adaptation, evaluation and
// token-weight visualization.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <glob.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dast/dast.hpp"

namespace fs = std::filesystem;
using namespace dast;
using corpus::ordered_json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Writes a line to stdout and, when open, to the run log.
class Log {
 public:
  void open(const fs::path& p) { file_.open(p, std::ios::app); }
  void operator()(const std::string& line) {
    if (quiet_) return;
    std::cout << line << std::endl;
    if (file_) file_ << line << '\n' << std::flush;
  }
  void set_quiet(bool q) { quiet_ = q; }

 private:
  std::ofstream file_;
  bool quiet_{false};
};

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string joined(const std::vector<std::string>& parts, const std::string& sep = ", ") {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  os << text;
}

ordered_json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw UsageError("cannot open '" + p.string() + "'");
  try {
    return ordered_json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

corpus::Corpus load_corpus_logged(const fs::path& p, Log& log) {
  std::vector<std::string> warnings;
  corpus::Corpus c = corpus::load_corpus(p, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  log("corpus: " + std::to_string(c.domains.size()) + " domains, " + std::to_string(c.dialogs.size()) +
      " dialogs from " + p.string());
  return c;
}

std::vector<fs::path> expand_glob(const std::string& pattern) {
  glob_t g{};
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  std::vector<fs::path> out;
  if (rc == 0)
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  globfree(&g);
  return out;
}

// ---------------------------------------------------------------- gen-data

struct GenData {
  corpus::SynthOptions opt;
  std::string out;
};

int run_gen_data(const GenData& a, Log& log) {
  if (a.opt.domains < 2) throw UsageError("need >=2 domains (got " + std::to_string(a.opt.domains) + ")");
  const corpus::Corpus c = corpus::synth_corpus(a.opt);
  corpus::save_corpus(c, a.out);
  std::size_t turns = 0;
  for (const auto& d : c.dialogs) turns += d.turns.size();
  log("wrote " + a.out + ": " + std::to_string(c.domains.size()) + " domains, " +
      std::to_string(c.dialogs.size()) + " dialogs, " + std::to_string(turns) + " turns");
  for (const auto& d : c.domains)
    log("  " + d.name + ": " + std::to_string(c.dialogs_in(d.name).size()) + " dialogs, slots " +
        joined(d.all_slots(), " "));
  return kOk;
}

// ---------------------------------------------------------------- train

struct Train {
  std::string corpus, target, config, out, resume, teacher;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_epochs, steps_per_epoch, batch_size;
  bool quiet{false};
};

TrainerConfig resolve_config(const Train& a) {
  TrainerConfig c;
  if (!a.config.empty()) c = trainer_config_from_json(read_json(a.config), c);
  if (!a.teacher.empty()) c.teacher = teacher_mode_from_string(a.teacher);
  if (a.seed) c.seed = *a.seed;
  if (a.max_epochs) c.max_epochs = *a.max_epochs;
  if (a.steps_per_epoch) c.steps_per_epoch = *a.steps_per_epoch;
  if (a.batch_size) c.batch_size = *a.batch_size;
  validate(c);
  return c;
}

void write_trace(const fs::path& dir, const trainer::TrainState& s) {
  std::ostringstream trace;
  trace << std::setprecision(17) << "epoch,step,loss,objective\n";
  for (const auto& p : s.trace) trace << p.epoch << ',' << p.step << ',' << p.loss << ',' << p.objective << '\n';
  write_text(dir / "trace.csv", trace.str());
  std::ostringstream epochs;
  epochs << std::setprecision(17) << "epoch,val_loss,lr_multiplier,improved\n";
  for (std::size_t i = 0; i < s.val_history.size(); ++i) {
    const std::vector<double> prefix(s.val_history.begin(), s.val_history.begin() + static_cast<std::ptrdiff_t>(i + 1));
    const auto sch = trainer::schedule_and_early_stop(prefix, s.config);
    epochs << i + 1 << ',' << s.val_history[i] << ',' << sch.lr_multiplier << ',' << sch.improved_last << '\n';
  }
  write_text(dir / "epochs.csv", epochs.str());
}

int run_train(const Train& a, Log& log) {
  const fs::path out(a.out);
  fs::create_directories(out);
  log.set_quiet(a.quiet);
  log.open(out / "train.log");
  const corpus::Corpus c = load_corpus_logged(a.corpus, log);
  const corpus::Vocab vocab = corpus::build_vocab(c);

  std::optional<trainer::MetaTrainer> t;
  if (!a.resume.empty()) {
    trainer::TrainState s = trainer::load_state(a.resume);
    if (!a.target.empty() && a.target != s.target)
      throw UsageError("--target '" + a.target + "' differs from the checkpoint target '" + s.target + "'");
    if (!a.config.empty() || !a.teacher.empty() || a.seed || a.batch_size || a.steps_per_epoch)
      throw UsageError("--resume takes its configuration from the checkpoint; only --max-epochs may change");
    if (a.max_epochs) {
      s.config.max_epochs = *a.max_epochs;
      s.finished = s.epoch >= s.config.max_epochs;
    }
    t.emplace(std::move(s), c, vocab);
    log("resumed from " + a.resume + " at epoch " + std::to_string(t->state().epoch));
  } else {
    if (a.target.empty()) throw UsageError("--target is required");
    t.emplace(resolve_config(a), c, vocab, a.target);
  }
  const TrainerConfig& cfg = t->state().config;
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  log("target domain: " + t->state().target);
  log("training domains: " + joined(t->state().sources));
  log("teacher: " + to_string(cfg.teacher) + ", vocab " + std::to_string(vocab.size()) +
      ", seed " + std::to_string(cfg.seed));

  auto save = [&](const trainer::TrainState& s) {
    trainer::save_state(out / "state.ckpt", s);
    trainer::ModelCheckpoint m{"meta", s.config, s.vocab, s.target, 0, {}, s.best_student, s.best_teacher};
    trainer::save_model(out / "model.ckpt", m);
    write_trace(out, s);
  };
  t->train([&](const trainer::MetaTrainer& tr, const trainer::EpochRecord& r) {
    const auto& s = tr.state();
    log("epoch " + std::to_string(r.epoch) + "  train_loss " + fixed(s.trace.back().loss) + "  val_loss " +
        fixed(r.val_loss) + "  lr_mult " + fixed(r.lr_multiplier, 3) + (r.improved ? "  *" : ""));
    save(s);
  });
  save(t->state());
  log("finished after " + std::to_string(t->state().epoch) + " epochs; best val_loss " +
      fixed(trainer::schedule_and_early_stop(t->state().val_history, cfg).best));
  return kOk;
}

// ---------------------------------------------------------------- adapt

struct Adapt {
  std::string checkpoint, corpus, target, out, teacher;
  std::size_t runs{10};
  std::optional<std::size_t> adapt_dialogs, steps;
  std::optional<std::uint64_t> seed;
};

int run_adapt(const Adapt& a, Log& log) {
  const trainer::ModelCheckpoint base = trainer::load_model(a.checkpoint);
  const corpus::Corpus c = load_corpus_logged(a.corpus, log);
  const std::string target = a.target.empty() ? base.target : a.target;
  if (!c.has_domain(target)) throw std::invalid_argument("unknown target domain '" + target + "'");
  const corpus::Vocab vocab(base.vocab);
  TrainerConfig cfg = base.config;
  if (a.adapt_dialogs) cfg.adapt_dialogs = *a.adapt_dialogs;
  if (a.steps) cfg.adapt_steps = *a.steps;
  if (a.seed) cfg.seed = *a.seed;
  if (!a.teacher.empty()) cfg.teacher = teacher_mode_from_string(a.teacher);
  if (a.runs == 0) throw UsageError("--runs must be >= 1");

  const fs::path out(a.out);
  fs::create_directories(out);
  ordered_json manifest{{"source_checkpoint", a.checkpoint},
                        {"target", target},
                        {"adapt_dialogs", cfg.adapt_dialogs},
                        {"steps", cfg.adapt_steps},
                        {"teacher", to_string(cfg.teacher)},
                        {"seed", cfg.seed},
                        {"runs", ordered_json::array()}};
  for (std::size_t run = 0; run < a.runs; ++run) {
    const auto split = trainer::target_split(c, target, cfg.adapt_dialogs, cfg.seed, run);
    const auto examples = trainer::examples_of(c, split.adapt, vocab, cfg.model);
    const auto r = trainer::adapt_to_domain(base.student, base.teacher, examples, cfg, run);
    const fs::path path = out / ("run_" + std::to_string(run) + ".ckpt");
    trainer::save_model(path, {"adapted", cfg, base.vocab, target, run, split.adapt, r.student, base.teacher});
    manifest["runs"].push_back({{"run", run},
                                {"checkpoint", path.string()},
                                {"adapt_dialogs", split.adapt},
                                {"steps_run", r.steps_run},
                                {"best_step", r.best_step},
                                {"eval_losses", r.eval_losses}});
    log("run " + std::to_string(run) + ": adapt loss " + fixed(r.eval_losses.front()) + " -> " +
        fixed(*std::min_element(r.eval_losses.begin(), r.eval_losses.end())) + " (best step " +
        std::to_string(r.best_step) + ") -> " + path.string());
  }
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  return kOk;
}

// ---------------------------------------------------------------- eval

struct Eval {
  std::string checkpoints, corpus, target, out;
  bool oracle{false};
  std::size_t max_dialogs{0};
};

int run_eval(const Eval& a, Log& log) {
  const corpus::Corpus c = load_corpus_logged(a.corpus, log);
  std::vector<fs::path> files;
  if (!a.checkpoints.empty()) {
    files = expand_glob(a.checkpoints);
    if (files.empty()) throw std::invalid_argument("no checkpoint matches '" + a.checkpoints + "'");
  } else if (!a.oracle) {
    throw UsageError("--checkpoints is required unless --oracle is given");
  }

  std::vector<metrics::RunRow> rows;
  auto test_dialogs = [&](const std::string& target, const std::vector<std::size_t>& adapt) {
    std::vector<std::size_t> out;
    for (std::size_t i : c.dialogs_in(target))
      if (std::find(adapt.begin(), adapt.end(), i) == adapt.end()) out.push_back(i);
    if (a.max_dialogs && out.size() > a.max_dialogs) out.resize(a.max_dialogs);
    return out;
  };
  auto report_row = [&](const std::string& label, const std::string& target, std::size_t run,
                        const metrics::RunEvaluation& r) {
    rows.push_back({target, run, r.scores});
    const auto j = metrics::scores_json(r.scores);
    log(label + ": inform " + fixed(j["inform"].get<double>(), 2) + "  success " +
        fixed(j["success"].get<double>(), 2) + "  bleu " + fixed(j["bleu"].get<double>(), 2) + "  slot_f1 " +
        fixed(j["slot_f1"].get<double>(), 2) + "  act_f1 " + fixed(j["act_f1"].get<double>(), 2));
  };

  if (files.empty()) {
    if (a.target.empty()) throw UsageError("--target is required with --oracle");
    if (!c.has_domain(a.target)) throw std::invalid_argument("unknown target domain '" + a.target + "'");
    report_row("oracle", a.target, 0, metrics::evaluate_run(c, test_dialogs(a.target, {}), metrics::oracle_predictor(c)));
  }
  for (const auto& f : files) {
    const trainer::ModelCheckpoint m = trainer::load_model(f);
    const std::string target = a.target.empty() ? m.target : a.target;
    if (!c.has_domain(target)) throw std::invalid_argument("unknown target domain '" + target + "'");
    const auto dialogs = test_dialogs(target, m.adapt_dialogs);
    const corpus::Vocab vocab(m.vocab);
    const auto predictor = a.oracle ? metrics::oracle_predictor(c)
                                    : metrics::student_predictor(c, vocab, m.student, m.config.model);
    report_row(f.string(), target, m.run, metrics::evaluate_run(c, dialogs, predictor));
  }

  const metrics::Report report = metrics::aggregate(rows);
  fs::path json_path(a.out);
  if (json_path.extension() != ".json") json_path += ".json";
  fs::path csv_path = json_path;
  csv_path.replace_extension(".csv");
  write_text(json_path, metrics::report_json(report).dump(2) + "\n");
  write_text(csv_path, metrics::report_csv(report));
  const auto mean = metrics::scores_json(report.mean), sd = metrics::scores_json(report.stddev);
  log("average over " + std::to_string(rows.size()) + " runs:");
  for (const char* k : {"inform", "success", "bleu", "slot_f1", "act_f1"})
    log(std::string("  ") + k + " " + fixed(mean[k].get<double>(), 2) + " +- " + fixed(sd[k].get<double>(), 2));
  log("wrote " + json_path.string() + " and " + csv_path.string());
  return kOk;
}

// ---------------------------------------------------------------- visualize

struct Visualize {
  std::string checkpoint, corpus, turns, out, domain;
  bool ansi{false};
};

// "3" is every turn of dialog 3; "3:1" is one turn; items are comma separated.
// Dialog indices count within `domain` when given, else across the corpus.
std::vector<std::pair<std::size_t, std::optional<std::size_t>>> parse_turns(const std::string& spec) {
  std::vector<std::pair<std::size_t, std::optional<std::size_t>>> out;
  std::stringstream ss(spec);
  std::string item;
  auto number = [&](const std::string& s) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (s.empty() || pos != s.size()) throw UsageError("bad --turns item '" + item + "'");
    return static_cast<std::size_t>(v);
  };
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      out.emplace_back(number(item), std::nullopt);
    } else {
      out.emplace_back(number(item.substr(0, colon)), number(item.substr(colon + 1)));
    }
  }
  if (out.empty()) throw UsageError("--turns selects nothing");
  return out;
}

int run_visualize(const Visualize& a, Log& log) {
  const trainer::ModelCheckpoint m = trainer::load_model(a.checkpoint);
  if (m.teacher.empty()) throw std::invalid_argument("checkpoint has no teacher parameters");
  const corpus::Corpus c = load_corpus_logged(a.corpus, log);
  const corpus::Vocab vocab(m.vocab);
  const std::string domain = a.domain.empty() ? m.target : a.domain;
  const std::vector<std::size_t> pool = domain == "all" ? std::vector<std::size_t>{} : c.dialogs_in(domain);
  const auto view = teacher::encoder_view(m.student);
  const auto tref = teacher::TeacherRef::bind(m.teacher, m.config.model);

  std::vector<visualize::WeightedSentence> sentences;
  for (const auto& [index, turn] : parse_turns(a.turns)) {
    const std::size_t di = domain == "all" ? index : (index < pool.size() ? pool[index] : c.dialogs.size());
    if (di >= c.dialogs.size())
      throw std::invalid_argument("dialog " + std::to_string(index) + " does not exist in '" + domain + "'");
    const auto& d = c.dialogs[di];
    const auto examples = make_examples(d, c.schema(d.domain), vocab, m.config.model);
    std::vector<std::size_t> turns;
    if (turn) {
      if (*turn >= examples.size())
        throw std::invalid_argument("dialog " + std::to_string(index) + " has no turn " + std::to_string(*turn));
      turns.push_back(*turn);
    } else {
      for (std::size_t t = 0; t < examples.size(); ++t) turns.push_back(t);
    }
    for (std::size_t t : turns) {
      const auto& ex = examples[t];
      ad::NoGradGuard no_grad;
      const ad::Var w = teacher::teacher_weights(ex.context, with_eos(ex.response), view.ref, tref);
      visualize::WeightedSentence s;
      s.label = d.domain + " dialog " + std::to_string(index) + " turn " + std::to_string(t);
      s.tokens = vocab.words(with_eos(ex.response));
      s.weights.assign(w.value().data().begin(), w.value().data().end());
      sentences.push_back(std::move(s));
    }
  }
  write_text(a.out, visualize::render_html(sentences, "Token weights: " + a.checkpoint));
  if (a.ansi) std::cout << visualize::render_ansi(sentences);
  log("wrote " + std::to_string(sentences.size()) + " sentences to " + a.out);
  return kOk;
}

// ---------------------------------------------------------------- convert-multiwoz

struct Convert {
  std::string in, out;
};

int run_convert(const Convert& a, Log& log) {
  corpus::ConversionReport rep;
  const corpus::Corpus c = corpus::multiwoz_adapt(fs::path(a.in), &rep);
  corpus::save_corpus(c, a.out);
  log("converted " + std::to_string(rep.converted) + " dialogs, skipped " +
      std::to_string(rep.skipped_multi_domain) + " multi-domain dialogs -> " + a.out);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial meta-learning for low-resource dialog generation"};
  app.require_subcommand(1);
  Log log;

  GenData gen;
  auto* cmd_gen = app.add_subcommand("gen-data", "Generate a synthetic multi-domain corpus");
  cmd_gen->add_option("--domains", gen.opt.domains, "Number of domains (>= 2)")->capture_default_str();
  cmd_gen->add_option("--dialogs", gen.opt.dialogs_per_domain, "Dialogs per domain")->capture_default_str();
  cmd_gen->add_option("--overlap", gen.opt.overlap, "Fraction of slots shared by all domains")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  cmd_gen->add_option("--informable", gen.opt.informable_per_domain, "Informable slots per domain")
      ->capture_default_str();
  cmd_gen->add_option("--requestable", gen.opt.requestable_per_domain, "Requestable slots per domain")
      ->capture_default_str();
  cmd_gen->add_option("--values", gen.opt.values_per_slot, "Values per informable slot")->capture_default_str();
  cmd_gen->add_option("--entities", gen.opt.entities_per_domain, "Database entities per domain")
      ->capture_default_str();
  cmd_gen->add_option("--seed", gen.opt.seed, "Generator seed")->capture_default_str();
  cmd_gen->add_option("--out", gen.out, "Output corpus JSON")->required();

  Train train;
  auto* cmd_train = app.add_subcommand("train", "Meta-train on every domain except the target");
  cmd_train->add_option("--corpus", train.corpus, "Corpus JSON")->required()->check(CLI::ExistingFile);
  cmd_train->add_option("--target", train.target, "Held-out target domain");
  cmd_train->add_option("--config", train.config, "Trainer config JSON")->check(CLI::ExistingFile);
  cmd_train->add_option("--out", train.out, "Output directory")->required();
  cmd_train->add_option("--teacher", train.teacher, "Teacher mode")->check(CLI::IsMember({"on", "off", "uniform"}));
  cmd_train->add_option("--resume", train.resume, "Resume from a training state")->check(CLI::ExistingFile);
  cmd_train->add_option("--seed", train.seed, "Seed (overrides config)");
  cmd_train->add_option("--max-epochs", train.max_epochs, "Epoch limit (overrides config)");
  cmd_train->add_option("--steps-per-epoch", train.steps_per_epoch, "Meta steps per epoch (overrides config)");
  cmd_train->add_option("--batch-size", train.batch_size, "Batch size (overrides config)");
  cmd_train->add_flag("--quiet", train.quiet, "Suppress progress output");

  Adapt adapt;
  auto* cmd_adapt = app.add_subcommand("adapt", "Fine-tune a meta-trained model on target samples");
  cmd_adapt->add_option("--checkpoint", adapt.checkpoint, "Model or training state")->required()->check(CLI::ExistingFile);
  cmd_adapt->add_option("--corpus", adapt.corpus, "Corpus JSON")->required()->check(CLI::ExistingFile);
  cmd_adapt->add_option("--target", adapt.target, "Target domain (default: the checkpoint's)");
  cmd_adapt->add_option("--runs", adapt.runs, "Independent adaptation runs")->capture_default_str();
  cmd_adapt->add_option("--adapt-dialogs", adapt.adapt_dialogs, "Target dialogs per run (default: config)");
  cmd_adapt->add_option("--steps", adapt.steps, "Adaptation steps (default: config)");
  cmd_adapt->add_option("--seed", adapt.seed, "Seed (default: config)");
  cmd_adapt->add_option("--teacher", adapt.teacher, "Teacher mode")->check(CLI::IsMember({"on", "off", "uniform"}));
  cmd_adapt->add_option("--out", adapt.out, "Output directory")->required();

  Eval eval;
  auto* cmd_eval = app.add_subcommand("eval", "Evaluate checkpoints on held-out target dialogs");
  cmd_eval->add_option("--checkpoints", eval.checkpoints, "Checkpoint path or glob");
  cmd_eval->add_option("--corpus", eval.corpus, "Corpus JSON")->required()->check(CLI::ExistingFile);
  cmd_eval->add_option("--target", eval.target, "Target domain (default: each checkpoint's)");
  cmd_eval->add_option("--out", eval.out, "Report path (.json; a .csv is written alongside)")->required();
  cmd_eval->add_flag("--oracle", eval.oracle, "Replay gold outputs instead of decoding");
  cmd_eval->add_option("--max-dialogs", eval.max_dialogs, "Cap on test dialogs per checkpoint (0: all)");

  Visualize vis;
  auto* cmd_vis = app.add_subcommand("visualize", "Render teacher token weights as HTML");
  cmd_vis->add_option("--checkpoint", vis.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  cmd_vis->add_option("--corpus", vis.corpus, "Corpus JSON")->required()->check(CLI::ExistingFile);
  cmd_vis->add_option("--turns", vis.turns, "Dialogs and turns, e.g. 0,3:1")->required();
  cmd_vis->add_option("--domain", vis.domain, "Domain the dialog indices count in ('all': whole corpus)");
  cmd_vis->add_option("--out", vis.out, "Output HTML")->required();
  cmd_vis->add_flag("--ansi", vis.ansi, "Also print a colored rendering to the terminal");

  Convert conv;
  auto* cmd_conv = app.add_subcommand("convert-multiwoz", "Convert a single-domain MultiWOZ export");
  cmd_conv->add_option("--in", conv.in, "Export JSON")->required()->check(CLI::ExistingFile);
  cmd_conv->add_option("--out", conv.out, "Output corpus JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*cmd_gen) return run_gen_data(gen, log);
    if (*cmd_train) return run_train(train, log);
    if (*cmd_adapt) return run_adapt(adapt, log);
    if (*cmd_eval) return run_eval(eval, log);
    if (*cmd_vis) return run_visualize(vis, log);
    if (*cmd_conv) return run_convert(conv, log);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const ad::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
