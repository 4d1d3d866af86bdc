// Command-line front end: one subcommand per workflow.

#include <csignal>
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "vaffect/app/commands.hpp"
#include "vaffect/serve/server.hpp"

namespace {

using namespace vaffect;
namespace fs = std::filesystem;

struct ModelFlags {
  std::string backbone = "vgg";
  std::string scale = "toy";
  std::string cell = "gru";
  std::string attention = "on";
  std::size_t hidden = 128;
  std::size_t layers = 2;
  bool no_peepholes = false;
  std::size_t window = 30;
  std::size_t seq_len = 80;
  std::size_t batch = 2;
  double lr = 1e-4;
  int strategy = 2;

  void add(CLI::App* c) {
    c->add_option("--backbone", backbone, "vgg | resnet | dense")->check(CLI::IsMember({"vgg", "resnet", "dense"}));
    c->add_option("--backbone-scale", scale, "toy | published")->check(CLI::IsMember({"toy", "published"}));
    c->add_option("--cell", cell, "gru | lstm | indrnn")->check(CLI::IsMember({"gru", "lstm", "indrnn"}));
    c->add_option("--attention", attention, "on | off")->check(CLI::IsMember({"on", "off"}));
    c->add_option("--hidden", hidden, "recurrent units per layer")->check(CLI::PositiveNumber);
    c->add_option("--layers", layers, "stacked recurrent layers")->check(CLI::PositiveNumber);
    c->add_flag("--no-peepholes", no_peepholes, "plain LSTM gates");
    c->add_option("--attention-window", window, "attention history length")->check(CLI::PositiveNumber);
    c->add_option("--seq-len", seq_len, "frames per sequence")->check(CLI::PositiveNumber);
    c->add_option("--batch", batch, "sequences per batch")->check(CLI::PositiveNumber);
    c->add_option("--lr", lr, "Adam learning rate")->check(CLI::PositiveNumber);
    c->add_option("--case", strategy, "training strategy 0-3")->check(CLI::Range(0, 3));
  }

  RunConfig build(std::uint64_t seed) const {
    RunConfig rc;
    const auto kind = parse_backbone(backbone);
    rc.published_backbone = scale == "published";
    rc.model.backbone = rc.published_backbone ? BackboneConfig::published(kind) : BackboneConfig::toy(kind);
    rc.model.cell.kind = parse_cell(cell);
    rc.model.cell.hidden = hidden;
    rc.model.cell.layers = layers;
    rc.model.cell.peepholes = !no_peepholes;
    rc.model.cell.time_steps = seq_len;
    rc.model.attention = attention == "on";
    rc.model.attention_window = window;
    rc.seq_length = seq_len;
    rc.batch_size = batch;
    rc.learning_rate = lr;
    rc.strategy = parse_case(strategy);
    rc.seed = seed;
    rc.model.seed = seed;
    return rc;
  }
};

std::vector<fs::path> as_paths(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

serve::AnnotationServer* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continuous valence/arousal estimation toolkit"};
  app.require_subcommand(1);
  std::uint64_t seed = 1;
  app.add_option("--seed", seed, "random seed")->capture_default_str();

  // match
  auto* match = app.add_subcommand("match", "assign annotator samples to video frames");
  app::MatchArgs ma;
  std::string m_val, m_aro, m_ann;
  match->add_option("--valence", m_val, "valence track (timestamp value lines)");
  match->add_option("--arousal", m_aro, "arousal track");
  match->add_option("--annotations", m_ann, "a single track file, or a dir with valence.txt and arousal.txt");
  match->add_option("--frames-count", ma.frames, "number of frames")->required();
  match->add_option("--out", ma.out, "output file")->required();

  // filter
  auto* filter = app.add_subcommand("filter", "pick the detection most similar to a reference");
  app::FilterArgs fa;
  filter->add_option("--candidates-dir", fa.candidates_dir)->required();
  filter->add_option("--reference", fa.reference)->required();
  filter->add_option("--bins", fa.bins)->check(CLI::Range(2, 256));
  filter->add_option("--out", fa.out)->required();

  // partition
  auto* part = app.add_subcommand("partition", "subject-disjoint train/validation/test split");
  app::PartitionArgs pa;
  std::string p_merged;
  part->add_option("--meta", pa.meta)->required();
  part->add_option("--merged-dir", p_merged, "merged annotations used to categorize uncategorized videos");
  part->add_option("--out", pa.out)->required();

  // pack
  auto* pack = app.add_subcommand("pack", "write a record container for one video");
  app::PackArgs pk;
  pack->add_option("--merged", pk.merged)->required();
  pack->add_option("--frames-dir", pk.frames_dir)->required();
  pack->add_option("--video", pk.video, "video name (default: merged file's directory)");
  pack->add_option("--out", pk.out)->required();

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  app::SynthArgs sa;
  bool s_no_pack = false;
  synth->add_option("--videos", sa.videos)->check(CLI::PositiveNumber);
  synth->add_option("--frames", sa.frames)->check(CLI::PositiveNumber);
  synth->add_option("--out", sa.out)->required();
  synth->add_flag("--no-pack", s_no_pack, "skip matching and record packing");

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "pretrain a backbone on the auxiliary texture task");
  ModelFlags pre_flags;
  app::PretrainArgs pr;
  pre_flags.add(pretrain);
  pretrain->add_option("--steps", pr.options.steps)->check(CLI::PositiveNumber);
  pretrain->add_option("--pretrain-batch", pr.options.batch_size)->check(CLI::PositiveNumber);
  pretrain->add_option("--pretrain-lr", pr.options.learning_rate)->check(CLI::PositiveNumber);
  pretrain->add_option("--out", pr.out, "checkpoint file")->required();

  // train
  auto* train = app.add_subcommand("train", "train a model, writing checkpoints");
  ModelFlags tr_flags;
  app::TrainArgs ta;
  std::vector<std::string> t_records, t_eval;
  std::string t_init_rnn, t_init_bb;
  double t_target = -2.0;
  tr_flags.add(train);
  train->add_option("--records", t_records, "record containers or directories")->required();
  train->add_option("--out-dir", ta.out_dir, "checkpoint directory")->required();
  train->add_option("--init-rnn", t_init_rnn, "case 3: checkpoint providing rnn/attention/head weights");
  train->add_option("--init-backbone", t_init_bb, "pretrained backbone checkpoint");
  train->add_option("--steps", ta.steps)->check(CLI::PositiveNumber);
  train->add_option("--checkpoint-every", ta.checkpoint_every);
  train->add_option("--log-every", ta.log_every);
  train->add_option("--eval-records", t_eval, "validation records for in-process evaluation");
  train->add_option("--eval-every", ta.eval_every);
  train->add_option("--target-ccc", t_target, "stop once validation CCC reaches this on both dimensions");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate checkpoints as they appear");
  app::EvalArgs ea;
  std::vector<std::string> e_records;
  int e_poll = 500;
  double e_idle = 0;
  bool e_follow = false;
  eval->add_option("--ckpt-dir", ea.ckpt_dir)->required();
  eval->add_option("--records", e_records)->required();
  eval->add_option("--report", ea.report, "report CSV (default: <ckpt-dir>/eval.csv)");
  eval->add_option("--poll-ms", e_poll)->check(CLI::PositiveNumber);
  eval->add_option("--idle-timeout", e_idle, "seconds without new checkpoints before exiting");
  eval->add_flag("--follow", e_follow, "keep watching after train.done appears");

  // test
  auto* test = app.add_subcommand("test", "score one checkpoint on test records");
  app::TestArgs te;
  std::vector<std::string> te_records;
  std::string te_pred;
  std::string te_best_report, te_dim;
  test->add_option("--ckpt", te.ckpt, "checkpoint file, or a checkpoint dir with --best-from");
  test->add_option("--best-from", te_best_report, "pick the best step from this eval report");
  test->add_option("--dimension", te_dim, "valence | arousal, for --best-from")->check(CLI::IsMember({"valence", "arousal"}));
  test->add_option("--records", te_records)->required();
  test->add_option("--report", te.report)->required();
  test->add_option("--predictions", te_pred, "per-frame predictions CSV");

  // stats
  auto* stats = app.add_subcommand("stats", "label histograms and scatter samples");
  app::StatsArgs st;
  std::vector<std::string> st_records;
  stats->add_option("--records", st_records)->required();
  stats->add_option("--out", st.out_dir, "output directory")->required();
  stats->add_option("--bin-width", st.bin_width);
  stats->add_option("--scatter-stride", st.scatter_stride)->check(CLI::PositiveNumber);

  // serve
  auto* srv = app.add_subcommand("serve", "HTTP endpoints for the annotation UI");
  std::string corpus_dir, host = "127.0.0.1";
  int port = 8080;
  srv->add_option("--corpus-dir", corpus_dir)->required();
  srv->add_option("--port", port)->check(CLI::Range(0, 65535));
  srv->add_option("--host", host);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*match) {
      if (!m_ann.empty()) {
        if (fs::is_directory(m_ann)) {
          if (m_val.empty()) m_val = (fs::path(m_ann) / "valence.txt").string();
          if (m_aro.empty()) m_aro = (fs::path(m_ann) / "arousal.txt").string();
        } else if (m_val.empty()) {
          m_val = m_ann;
        } else {
          throw ContractError("match: --annotations conflicts with --valence");
        }
      }
      if (!m_val.empty()) ma.valence = m_val;
      if (!m_aro.empty()) ma.arousal = m_aro;
      auto rows = app::cmd_match(ma);
      std::printf("matched %zu frames -> %s\n", rows.size(), ma.out.c_str());
    } else if (*filter) {
      auto picks = app::cmd_filter(fa);
      std::printf("chose %zu detections -> %s\n", picks.size(), fa.out.c_str());
    } else if (*part) {
      pa.seed = seed;
      if (!p_merged.empty()) pa.merged_dir = p_merged;
      auto videos = app::cmd_partition(pa);
      std::size_t n[3] = {0, 0, 0};
      for (const auto& v : videos) ++n[static_cast<int>(*v.split)];
      std::printf("train %zu validation %zu test %zu -> %s\n", n[0], n[1], n[2], pa.out.c_str());
    } else if (*pack) {
      std::printf("packed %zu records -> %s\n", app::cmd_pack(pk), pk.out.c_str());
    } else if (*synth) {
      sa.seed = seed;
      sa.pack = !s_no_pack;
      auto plan = app::cmd_synth(sa);
      std::printf("wrote %zu videos -> %s\n", plan.size(), sa.out.c_str());
    } else if (*pretrain) {
      pr.run = pre_flags.build(seed);
      pr.options.seed = seed;
      const double acc = app::cmd_pretrain(pr);
      std::printf("pretrained backbone (running accuracy %.3f) -> %s\n", acc, pr.out.c_str());
    } else if (*train) {
      ta.run = tr_flags.build(seed);
      ta.records = as_paths(t_records);
      ta.eval_records = as_paths(t_eval);
      if (!t_init_rnn.empty()) ta.init.recurrent = t_init_rnn;
      if (!t_init_bb.empty()) ta.init.backbone = t_init_bb;
      if (t_target > -2.0) ta.target_ccc = t_target;
      auto out = app::cmd_train(ta);
      if (ta.target_ccc && !out.reached_target_at) {
        std::printf("trained %llu steps; target CCC not reached\n", static_cast<unsigned long long>(out.steps));
        return 3;
      }
      std::printf("trained %llu steps -> %s\n", static_cast<unsigned long long>(out.steps), ta.out_dir.c_str());
    } else if (*eval) {
      ea.records = as_paths(e_records);
      if (ea.report.empty()) ea.report = ea.ckpt_dir / "eval.csv";
      ea.watch.poll = std::chrono::milliseconds(e_poll);
      ea.watch.stop_when_done = !e_follow;
      if (e_idle > 0) ea.watch.idle_timeout = std::chrono::milliseconds(static_cast<long>(e_idle * 1000));
      auto rows = app::cmd_eval(ea);
      std::printf("evaluated %zu checkpoints -> %s\n", rows.size(), ea.report.c_str());
    } else if (*test) {
      te.records = as_paths(te_records);
      if (!te_pred.empty()) te.predictions = te_pred;
      if (!te_best_report.empty()) {
        if (te_dim.empty()) throw ContractError("test: --best-from needs --dimension");
        const auto step = select_best(read_reports(te_best_report), corpus::parse_dimension(te_dim));
        te.config_dir = te.ckpt;
        te.ckpt = te.ckpt / checkpoint_filename(step);
      }
      if (te.ckpt.empty()) throw ContractError("test: --ckpt is required");
      auto r = app::cmd_test(te);
      std::printf("%s\n", format_report_row(r).c_str());
    } else if (*stats) {
      st.records = as_paths(st_records);
      std::printf("summarised %zu frames -> %s\n", app::cmd_stats(st), st.out_dir.c_str());
    } else if (*srv) {
      serve::AnnotationServer server(corpus_dir);
      g_server = &server;
      std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
      std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
      std::fprintf(stderr, "serving %s on %s:%d\n", corpus_dir.c_str(), host.c_str(), port);
      if (!server.listen(host, port)) throw ContractError("cannot listen on " + host + ":" + std::to_string(port));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
