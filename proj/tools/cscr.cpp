// cscr: command-line driver for the routing pipeline.
//
// Every subcommand resolves its parameters as defaults < --config JSON file < CSCR_<KEY>
// environment variables < flags, writes config.json plus its artifacts into
// <run_dir>/<subcommand>-<hash prefix>, and prints that directory on stdout.
// Exit codes: 0 ok, 1 data or validation error, 2 usage error.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <sstream>

#include "cscr/cscr.hpp"

using namespace cscr;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Role { param, input, location };

struct Param {
  std::string key;
  json def;
  std::string help;
  Role role = Role::param;
};

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

std::string env_name(std::string key) {
  for (auto& ch : key) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return "CSCR_" + key;
}

// Parses text into the JSON type of `like`. Throws std::invalid_argument on malformed text.
json parse_as(const json& like, const std::string& text) {
  std::size_t pos = 0;
  if (like.is_boolean()) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw std::invalid_argument("expected true/false");
  }
  if (like.is_number_unsigned()) {
    if (!text.empty() && text[0] == '-') throw std::invalid_argument("expected a non-negative integer");
    const auto v = std::stoull(text, &pos);
    if (pos != text.size()) throw std::invalid_argument("expected an integer");
    return v;
  }
  if (like.is_number()) {
    const double v = std::stod(text, &pos);
    if (pos != text.size()) throw std::invalid_argument("expected a number");
    return v;
  }
  if (like.is_array()) {
    json arr = json::array();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) arr.push_back(parse_as(json(0.0), item));
    return arr;
  }
  return text;
}

bool same_kind(const json& like, const json& v) {
  if (like.is_boolean()) return v.is_boolean();
  if (like.is_number_unsigned()) return v.is_number_unsigned();
  if (like.is_number()) return v.is_number();
  if (like.is_array()) {
    if (!v.is_array()) return false;
    for (const auto& x : v)
      if (!x.is_number()) return false;
    return true;
  }
  return v.is_string();
}

struct Command {
  std::string name;
  std::vector<Param> params;
  CLI::App* app = nullptr;
  std::map<std::string, std::string> flag_values;
  std::string config_file;
};

Command command(std::string name, std::vector<Param> params) {
  Command c;
  c.name = std::move(name);
  c.params = std::move(params);
  return c;
}

void register_command(CLI::App& root, Command& cmd, const std::string& description) {
  cmd.app = root.add_subcommand(cmd.name, description);
  cmd.app->add_option("--config", cmd.config_file, "JSON file of parameter values");
  for (const auto& p : cmd.params) {
    const std::string def = p.def.is_string() ? p.def.get<std::string>() : p.def.dump();
    cmd.app->add_option(flag_name(p.key), cmd.flag_values[p.key], p.help + " [default: " + def + "]");
  }
}

json resolve(const Command& cmd) {
  json cfg = json::object();
  for (const auto& p : cmd.params) cfg[p.key] = p.def;

  auto assign = [&](const Param& p, const json& v, const std::string& origin) {
    if (!same_kind(p.def, v)) throw DataError(origin + ": value for \"" + p.key + "\" has the wrong type");
    cfg[p.key] = p.def.is_number_float() ? json(v.get<double>()) : v;
  };
  auto find = [&](const std::string& key) -> const Param* {
    for (const auto& p : cmd.params)
      if (p.key == key) return &p;
    return nullptr;
  };

  if (!cmd.config_file.empty()) {
    std::ifstream in(cmd.config_file);
    if (!in) throw DataError("cannot open config file " + cmd.config_file);
    json file;
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw DataError(cmd.config_file + ": " + e.what());
    }
    if (!file.is_object()) throw DataError(cmd.config_file + ": expected a JSON object");
    for (const auto& [key, value] : file.items()) {
      if (key == "config_hash" || key == "subcommand") continue;
      const Param* p = find(key);
      if (!p) throw DataError(cmd.config_file + ": unknown key \"" + key + "\" for " + cmd.name);
      assign(*p, value, cmd.config_file);
    }
  }
  for (const auto& p : cmd.params) {
    const char* env = std::getenv(env_name(p.key).c_str());
    if (!env) continue;
    try {
      assign(p, parse_as(p.def, env), env_name(p.key));
    } catch (const std::invalid_argument& e) {
      throw DataError(env_name(p.key) + ": " + e.what());
    } catch (const std::out_of_range& e) {
      throw DataError(env_name(p.key) + ": out of range");
    }
  }
  for (const auto& p : cmd.params) {
    if (cmd.app->get_option(flag_name(p.key))->count() == 0) continue;
    try {
      cfg[p.key] = parse_as(p.def, cmd.flag_values.at(p.key));
    } catch (const std::exception& e) {
      throw UsageError(flag_name(p.key) + ": " + e.what());
    }
  }
  return cfg;
}

std::string file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return hex64(fnv1a64(bytes));
}

// Hash preimage: parameters plus the content digests of every input file. Paths and the
// output location are left out, so identical inputs hash identically wherever they live.
std::string hash_of(const Command& cmd, const json& cfg) {
  json pre = {{"subcommand", cmd.name}, {"params", json::object()}, {"inputs", json::object()}};
  for (const auto& p : cmd.params) {
    if (p.role == Role::param) pre["params"][p.key] = cfg[p.key];
    if (p.role == Role::input) {
      const auto path = cfg[p.key].get<std::string>();
      if (path.empty()) continue;
      pre["inputs"][p.key] = file_digest(path);
      // Probe payloads carry their header in a sidecar.
      if (fs::path(path).extension() == ".bin") pre["inputs"][p.key + "_header"] = file_digest(sidecar_path(path));
    }
  }
  return config_hash(pre);
}

fs::path make_run_dir(const Command& cmd, const json& cfg, const std::string& hash) {
  const fs::path dir = fs::path(cfg["run_dir"].get<std::string>()) / (cmd.name + "-" + hash.substr(0, 12));
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create run directory " + dir.string() + ": " + ec.message());
  json echo = cfg;
  echo["config_hash"] = hash;
  detail::open_out(dir / "config.json") << echo.dump(2) << '\n';
  return dir;
}

void write_json(const fs::path& path, const json& j) { detail::open_out(path) << j.dump(2) << '\n'; }

std::string str(const json& cfg, const char* key) { return cfg[key].get<std::string>(); }

std::string require_path(const json& cfg, const char* key) {
  auto s = str(cfg, key);
  if (s.empty()) throw UsageError(flag_name(key) + " is required");
  return s;
}

// ---- parameter tables ----

Param input(std::string key, std::string help) { return {std::move(key), "", std::move(help), Role::input}; }

std::vector<Param> common_params() { return {{"run_dir", "runs", "output root", Role::location}}; }

std::vector<Param> train_params() {
  const TrainConfig d;
  return {{"epochs", d.epochs, "training epochs"},
          {"batch_size", d.batch_size, "minibatch size"},
          {"learning_rate", d.learning_rate, "AdamW learning rate"},
          {"weight_decay", d.weight_decay, "AdamW decoupled weight decay"},
          {"gamma", d.gamma, "cost penalty on denominator terms"},
          {"num_bands", d.num_bands, "number of cost bands"},
          {"alpha", d.alpha, "band temperature slope"},
          {"tau_min", d.tau_min, "lowest band temperature"},
          {"tau", d.tau, "temperature of the vanilla loss"},
          {"seed", d.seed, "training seed"},
          {"theta_pos", d.theta_pos, "correctness threshold"},
          {"theta_pos_continuous", 0.9, "relative threshold used by auto mode on continuous quality"},
          {"threshold_mode", "auto", "auto | absolute | relative"},
          {"hidden_mult", d.hidden_mult, "hidden width as a multiple of the embedding dim"},
          {"activation", "tanh", "tanh | identity"},
          {"loss", "cost_spectrum", "cost_spectrum | vanilla"}};
}

struct Threshold {
  ThresholdMode mode;
  double theta;
};

// auto: absolute theta_pos on 0/1 quality, otherwise theta_pos_continuous times the per-query best.
Threshold resolve_threshold(const json& cfg, const std::vector<QueryRecord>& queries) {
  const auto s = str(cfg, "threshold_mode");
  if (s == "absolute") return {ThresholdMode::absolute, cfg["theta_pos"]};
  if (s == "relative") return {ThresholdMode::relative, cfg["theta_pos"]};
  if (s != "auto") throw DataError("threshold_mode must be auto, absolute or relative, got \"" + s + "\"");
  const bool binary = std::all_of(queries.begin(), queries.end(), [](const QueryRecord& q) {
    return std::all_of(q.quality.begin(), q.quality.end(), [](double v) { return v == 0.0 || v == 1.0; });
  });
  if (binary) return {ThresholdMode::absolute, cfg["theta_pos"]};
  return {ThresholdMode::relative, cfg["theta_pos_continuous"]};
}

TrainConfig train_config_from(const json& cfg, const std::vector<QueryRecord>& queries) {
  TrainConfig t;
  const auto th = resolve_threshold(cfg, queries);
  t.theta_pos = th.theta;
  t.threshold_mode = th.mode;
  t.epochs = cfg["epochs"];
  t.batch_size = cfg["batch_size"];
  t.learning_rate = cfg["learning_rate"];
  t.weight_decay = cfg["weight_decay"];
  t.gamma = cfg["gamma"];
  t.num_bands = cfg["num_bands"];
  t.alpha = cfg["alpha"];
  t.tau_min = cfg["tau_min"];
  t.tau = cfg["tau"];
  t.seed = cfg["seed"];
  t.hidden_mult = cfg["hidden_mult"];
  try {
    t.activation = parse_activation(str(cfg, "activation"));
  } catch (const ContractError& e) {
    throw DataError(e.what());
  }
  const auto loss = str(cfg, "loss");
  if (loss == "cost_spectrum")
    t.loss = LossKind::cost_spectrum;
  else if (loss == "vanilla")
    t.loss = LossKind::vanilla;
  else
    throw DataError("loss must be cost_spectrum or vanilla, got \"" + loss + "\"");
  return t;
}

std::vector<Param> routing_params() {
  const PolicyConfig d;
  return {input("pool", "expert pool JSONL"),
          input("queries", "query dataset JSONL"),
          input("descriptors", "descriptors JSONL (cscr policy)"),
          input("head", "trained head checkpoint (cscr policy)"),
          {"policy", "cscr", "cscr | oracle | random | pareto_random | thompson | single"},
          {"k", d.k, "neighbours retrieved per query"},
          {"seed", d.seed, "seed for stochastic policies"},
          {"literal_argmin", false, "minimize sim + lambda*cost instead"},
          {"lambda_max", d.lambda_max, "largest lambda on the grid"},
          {"single_expert", "", "expert id for the single policy"},
          {"theta_pos", 0.5, "correctness threshold"},
          {"theta_pos_continuous", 0.9, "relative threshold used by auto mode on continuous quality"},
          {"threshold_mode", "auto", "auto | absolute | relative"},
          {"split", "test", "query split to route"}};
}

struct RoutingSetup {
  ExpertPool pool;
  std::vector<QueryRecord> all, train, eval;
  std::vector<Descriptor> descriptors;
  std::optional<FlatIndex> index;
  std::optional<MlpHead> head;
  RouterContext ctx;
  PolicyConfig policy;
};

Policy parse_policy_or_throw(const std::string& s) {
  try {
    return parse_policy(s);
  } catch (const ContractError& e) {
    throw DataError(e.what());
  }
}

void setup_routing(RoutingSetup& s, const json& cfg, const std::vector<Policy>& policies) {
  s.pool = load_expert_pool(require_path(cfg, "pool"));
  s.all = load_query_dataset(require_path(cfg, "queries"), s.pool);
  s.train = select_split(s.all, Split::train);
  const auto split = str(cfg, "split");
  if (split != "train" && split != "test") throw DataError("split must be train or test");
  s.eval = select_split(s.all, split == "train" ? Split::train : Split::test);
  if (s.eval.empty()) throw DataError("no queries in the " + split + " split");

  const bool need_cscr = std::find(policies.begin(), policies.end(), Policy::cscr) != policies.end();
  if (need_cscr) {
    s.descriptors = load_descriptors(require_path(cfg, "descriptors"), s.pool);
    s.index.emplace(s.descriptors);
  }
  // ablate trains its own heads and has no head input.
  if (need_cscr && cfg.contains("head")) {
    s.head = load_checkpoint(require_path(cfg, "head"));
    if (s.head->in_dim != s.all.front().embedding.size())
      throw DataError("head input dimension " + std::to_string(s.head->in_dim) + " does not match embedding dimension " +
                      std::to_string(s.all.front().embedding.size()));
    if (s.head->out_dim != s.index->dim())
      throw DataError("head output dimension " + std::to_string(s.head->out_dim) +
                      " does not match descriptor dimension " + std::to_string(s.index->dim()));
  }
  s.ctx.index = s.index ? &*s.index : nullptr;
  s.ctx.head = s.head ? &*s.head : nullptr;
  s.ctx.expert_ids = s.pool.ids();
  s.ctx.cost = normalize_costs(s.pool).cost;
  s.ctx.train_mean_quality = mean_quality(s.train, s.pool.size());
  const auto th = resolve_threshold(cfg, s.all);
  s.ctx.theta_pos = th.theta;
  s.ctx.threshold_mode = th.mode;

  s.policy.k = cfg["k"];
  s.policy.seed = cfg["seed"];
  s.policy.literal_argmin = cfg["literal_argmin"];
  s.policy.lambda_max = cfg["lambda_max"];
  const auto single = str(cfg, "single_expert");
  if (!single.empty()) {
    auto idx = s.pool.index_of(single);
    if (!idx) throw DataError("single_expert \"" + single + "\" is not in the pool");
    s.policy.single_expert = *idx;
  } else if (std::find(policies.begin(), policies.end(), Policy::single) != policies.end()) {
    throw DataError("the single policy needs --single-expert");
  }
  if (need_cscr && (s.policy.k < 1 || s.policy.k > s.pool.size()))
    throw DataError("k must lie in [1, " + std::to_string(s.pool.size()) + "]");
  try {
    s.policy.validate();
  } catch (const ContractError& e) {
    throw DataError(e.what());
  }
}

std::vector<double> lambda_grid(const json& cfg) {
  const std::size_t n = cfg["lambda_points"];
  if (n == 0) throw DataError("lambda_points must be >= 1");
  const double lmax = cfg["lambda_max"];
  if (!(lmax > 0.0)) throw DataError("lambda_max must be > 0");
  return default_lambda_grid(n, lmax);
}

PolicyRun evaluate(const RoutingSetup& s, Policy policy, const std::vector<double>& grid) {
  PolicyConfig pc = s.policy;
  pc.policy = policy;
  return run_policy(pc, s.ctx, s.eval, grid);
}

// ---- subcommands ----

int cmd_synth(const json& cfg, const fs::path& dir) {
  SynthConfig sc;
  sc.seed = cfg["seed"];
  sc.n_clusters = cfg["n_clusters"];
  sc.n_experts = cfg["n_experts"];
  sc.n_train = cfg["n_train"];
  sc.n_test = cfg["n_test"];
  sc.embed_dim = cfg["embed_dim"];
  sc.descriptor_dim = cfg["descriptor_dim"];
  sc.noise_sigma = cfg["noise_sigma"];
  sc.cost_tiers = cfg["cost_tiers"].get<std::vector<double>>();
  sc.anti_correlated = cfg["anti_correlated"];
  sc.descriptor_noise = cfg["descriptor_noise"];
  sc.perplexity_every = cfg["perplexity_every"];
  SynthData data;
  try {
    data = generate(sc);
  } catch (const ContractError& e) {
    throw DataError(e.what());
  }
  validate_pool(data.pool);

  write_expert_pool(dir / "pool.jsonl", data.pool);
  write_query_dataset(dir / "queries.jsonl", data.pool, data.queries);
  write_descriptors(dir / "descriptors_planted.jsonl", data.descriptors);

  std::vector<Descriptor> logit_descs, ppl_descs;
  for (const auto& d : data.descriptors) (d.kind == DescriptorKind::logit ? logit_descs : ppl_descs).push_back(d);
  const std::uint64_t seed = cfg["seed"];
  if (!logit_descs.empty())
    write_probe_data(dir / "probes_logit.bin",
                     synth_logit_probes(logit_descs, cfg["probes"], cfg["steps"], cfg["extra_tokens"],
                                        cfg["probe_noise"], seed + 1));
  if (!ppl_descs.empty())
    write_probe_data(dir / "probes_perplexity.bin", synth_perplexity_table(ppl_descs, cfg["probe_noise"], seed + 2));
  json truth = to_json(data.truth);
  truth["synth_config"] = to_json(data.config);
  write_json(dir / "truth.json", truth);
  return 0;
}

int cmd_descriptors(const json& cfg, const fs::path& dir) {
  const auto pool = load_expert_pool(require_path(cfg, "pool"));
  std::optional<LogitProbeTensor> logit;
  std::optional<PerplexityTable> ppl;
  if (!str(cfg, "logit_probes").empty())
    logit = std::get<LogitProbeTensor>(load_probe_data(str(cfg, "logit_probes"), pool, DescriptorKind::logit));
  if (!str(cfg, "perplexity_probes").empty())
    ppl = std::get<PerplexityTable>(load_probe_data(str(cfg, "perplexity_probes"), pool, DescriptorKind::perplexity));
  const std::size_t K = cfg["basis_size"];
  std::vector<Descriptor> descs;
  try {
    descs = build_descriptors(pool, logit ? &*logit : nullptr, ppl ? &*ppl : nullptr, K);
  } catch (const ContractError& e) {
    throw DataError(e.what());
  }
  write_descriptors(dir / "descriptors.jsonl", descs);
  json info = {{"basis_size", K}};
  if (logit) info["token_basis"] = select_token_basis(*logit, K).token_ids;
  write_json(dir / "basis.json", info);
  return 0;
}

int cmd_train(const json& cfg, const fs::path& dir, const std::string& hash) {
  const auto pool = load_expert_pool(require_path(cfg, "pool"));
  const auto queries = load_query_dataset(require_path(cfg, "queries"), pool);
  const auto descs = load_descriptors(require_path(cfg, "descriptors"), pool);
  const auto train_set = select_split(queries, Split::train);
  if (train_set.empty()) throw DataError("no training queries");
  const auto tc = train_config_from(cfg, queries);
  try {
    tc.validate();
  } catch (const ContractError& e) {
    throw DataError(e.what());
  }
  TrainResult res = train(train_set, pool, descs, tc);
  res.manifest["run_config_hash"] = hash;
  save_checkpoint(dir / "head.ckpt", res.head, hash);
  write_json(dir / "manifest.json", res.manifest);
  auto out = detail::open_out(dir / "loss.csv");
  out << "epoch,loss,excluded_queries\n";
  for (const auto& e : res.epochs) out << e.epoch << ',' << fmt_double(e.loss) << ',' << e.excluded_queries << '\n';
  return 0;
}

int cmd_index(const json& cfg, const fs::path& dir) {
  const auto pool = load_expert_pool(require_path(cfg, "pool"));
  const auto descs = load_descriptors(require_path(cfg, "descriptors"), pool);
  const FlatIndex index(descs);
  const auto sim = descriptor_similarity_matrix(descs);
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < sim.rows; ++r) rows.emplace_back(sim.row(r).begin(), sim.row(r).end());
  write_json(dir / "index.json", {{"size", index.size()}, {"dim", index.dim()}, {"expert_ids", index.ids()},
                                  {"similarity", rows}});
  return 0;
}

int cmd_route(const json& cfg, const fs::path& dir) {
  const Policy policy = parse_policy_or_throw(str(cfg, "policy"));
  RoutingSetup s;
  setup_routing(s, cfg, {policy});
  const double lambda = cfg["lambda"];
  if (lambda < 0.0) throw DataError("lambda must be >= 0");
  const auto run = evaluate(s, policy, {lambda});
  write_decisions_csv(dir / "decisions.csv", run);
  return 0;
}

int cmd_eval(const json& cfg, const fs::path& dir, const std::string& hash) {
  const Policy policy = parse_policy_or_throw(str(cfg, "policy"));
  RoutingSetup s;
  setup_routing(s, cfg, {policy});
  const auto run = evaluate(s, policy, lambda_grid(cfg));
  const auto curve = curve_of(run);
  const auto report = metric_report(policy, curve, pool_stats(s.eval, s.ctx.cost));
  write_json(dir / "report.json", report_json(report, hash));
  write_curve_csv(dir / "curve.csv", curve);
  write_decisions_csv(dir / "decisions.csv", run);
  return 0;
}

std::vector<Policy> policy_list(const std::string& text) {
  std::vector<Policy> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_policy_or_throw(item));
  if (out.empty()) throw DataError("no policies given");
  return out;
}

int cmd_sweep(const json& cfg, const fs::path& dir, const std::string& hash) {
  const auto policies = policy_list(str(cfg, "policies"));
  RoutingSetup s;
  setup_routing(s, cfg, policies);
  const auto grid = lambda_grid(cfg);
  const auto stats = pool_stats(s.eval, s.ctx.cost);
  json reports = json::array();
  for (Policy p : policies) {
    const auto run = evaluate(s, p, grid);
    const auto curve = curve_of(run);
    reports.push_back(report_json(metric_report(p, curve, stats), hash));
    write_curve_csv(dir / ("curve_" + std::string(to_string(p)) + ".csv"), curve);
  }
  write_json(dir / "sweep.json", {{"config_hash", hash}, {"reports", reports}});
  return 0;
}

int cmd_significance(const json& cfg, const fs::path& dir, const std::string& hash) {
  const Policy pa = parse_policy_or_throw(str(cfg, "policy_a"));
  const Policy pb = parse_policy_or_throw(str(cfg, "policy_b"));
  RoutingSetup s;
  setup_routing(s, cfg, {pa, pb});
  const auto grid = lambda_grid(cfg);
  const auto a = evaluate(s, pa, grid), b = evaluate(s, pb, grid);
  const std::size_t n_resamples = cfg["n_resamples"];
  if (n_resamples < 100) throw DataError("n_resamples must be >= 100");
  const auto boot = paired_bootstrap_audc(a, b, c_max_of(s.ctx.cost), n_resamples, cfg["bootstrap_seed"]);
  const double budget = cfg["budget"];
  const auto mc = budget < 0.0 ? mcnemar_matched_budget(a, b) : mcnemar_matched_budget(a, b, budget);
  json j = significance_json(boot, mc, hash);
  j["policy_a"] = to_string(pa);
  j["policy_b"] = to_string(pb);
  write_json(dir / "significance.json", j);
  return 0;
}

std::vector<double> grid_axis(const json& cfg, const char* key, double fallback) {
  auto v = cfg[key].get<std::vector<double>>();
  if (v.empty()) v.push_back(fallback);
  return v;
}

int cmd_ablate(const json& cfg, const fs::path& dir, const std::string& hash) {
  bool any = false;
  for (const char* key : {"grid_num_bands", "grid_gamma", "grid_alpha", "grid_tau_min", "grid_k"})
    any = any || !cfg[key].empty();
  if (!any) throw DataError("empty ablation grid: give at least one of --grid-num-bands, --grid-gamma, --grid-alpha, "
                            "--grid-tau-min, --grid-k");
  RoutingSetup s;
  setup_routing(s, cfg, {Policy::cscr, Policy::oracle});
  const auto base = train_config_from(cfg, s.all);
  const auto grid = lambda_grid(cfg);
  const auto stats = pool_stats(s.eval, s.ctx.cost);

  auto out = detail::open_out(dir / "ablation.csv");
  out << "cell,num_bands,gamma,alpha,tau_min,k,audc,max_acc,cost_at_max_acc\n";
  std::size_t cell = 0;
  for (double K : grid_axis(cfg, "grid_num_bands", double(base.num_bands)))
    for (double gamma : grid_axis(cfg, "grid_gamma", base.gamma))
      for (double alpha : grid_axis(cfg, "grid_alpha", base.alpha))
        for (double tau_min : grid_axis(cfg, "grid_tau_min", base.tau_min))
          for (double k : grid_axis(cfg, "grid_k", double(s.policy.k))) {
            if (K < 1 || K != std::floor(K) || k < 1 || k != std::floor(k) || k > double(s.pool.size()))
              throw DataError("grid num_bands and k must be positive integers within the pool size");
            TrainConfig tc = base;
            tc.num_bands = static_cast<std::size_t>(K);
            tc.gamma = gamma;
            tc.alpha = alpha;
            tc.tau_min = tau_min;
            try {
              tc.validate();
            } catch (const ContractError& e) {
              throw DataError(e.what());
            }
            const auto res = train(s.train, s.pool, s.descriptors, tc);
            RoutingSetup cs = s;
            cs.ctx.index = &*cs.index;
            cs.ctx.head = &res.head;
            cs.policy.k = static_cast<std::size_t>(k);
            const auto run = evaluate(cs, Policy::cscr, grid);
            const auto curve = curve_of(run);
            const auto report = metric_report(Policy::cscr, curve, stats);
            double cost_at_max = INFINITY;
            for (const auto& p : curve.points)
              if (p.mean_quality == report.peak) cost_at_max = std::min(cost_at_max, p.mean_cost / report.c_max);
            const fs::path cell_dir = dir / ("cell_" + std::to_string(cell));
            fs::create_directories(cell_dir);
            write_decisions_csv(cell_dir / "decisions.csv", run);
            write_json(cell_dir / "report.json", report_json(report, hash));
            out << cell << ',' << tc.num_bands << ',' << fmt_double(gamma) << ',' << fmt_double(alpha) << ','
                << fmt_double(tau_min) << ',' << cs.policy.k << ',' << fmt_double(report.audc) << ','
                << fmt_double(report.peak) << ',' << fmt_double(cost_at_max) << '\n';
            ++cell;
          }
  return 0;
}

std::vector<Param> concat(std::vector<Param> a, const std::vector<Param>& b) {
  for (const auto& p : b) {
    auto it = std::find_if(a.begin(), a.end(), [&](const Param& q) { return q.key == p.key; });
    if (it == a.end()) a.push_back(p);
  }
  return a;
}

std::vector<Param> with_grid(std::vector<Param> ps) {
  ps.push_back({"lambda_points", std::size_t{50}, "points on the lambda grid"});
  return ps;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cost-spectrum contrastive routing"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  const SynthConfig sd;
  std::vector<Command> cmds;
  cmds.push_back(command("synth",
                  concat(common_params(),
                         {{"seed", sd.seed, "generator seed"},
                          {"n_clusters", sd.n_clusters, "latent query clusters"},
                          {"n_experts", sd.n_experts, "experts in the pool"},
                          {"n_train", sd.n_train, "training queries"},
                          {"n_test", sd.n_test, "test queries"},
                          {"embed_dim", sd.embed_dim, "query embedding dimension"},
                          {"descriptor_dim", sd.descriptor_dim, "descriptor dimension"},
                          {"noise_sigma", sd.noise_sigma, "embedding noise around cluster centroids"},
                          {"cost_tiers", sd.cost_tiers, "comma-separated tier costs"},
                          {"anti_correlated", false, "make cheap tiers the strong ones"},
                          {"descriptor_noise", sd.descriptor_noise, "expert-specific descriptor residual"},
                          {"perplexity_every", sd.perplexity_every, "every n-th expert is perplexity-kind (0: none)"},
                          {"probes", std::size_t{16}, "logit probe prompts"},
                          {"steps", std::size_t{4}, "decoding steps per probe"},
                          {"extra_tokens", std::size_t{8}, "low-mass distractor tokens"},
                          {"probe_noise", 0.1, "log-normal noise on probe outputs"}})));
  cmds.push_back(command("descriptors", concat(common_params(), {input("pool", "expert pool JSONL"),
                                                          input("logit_probes", "logit probe .bin"),
                                                          input("perplexity_probes", "perplexity probe .bin"),
                                                          {"basis_size", std::size_t{16}, "token basis size"}})));
  cmds.push_back(command("train", concat(concat(common_params(), {input("pool", "expert pool JSONL"),
                                                            input("queries", "query dataset JSONL"),
                                                            input("descriptors", "descriptors JSONL")}),
                                  train_params())));
  cmds.push_back(command("index", concat(common_params(), {input("pool", "expert pool JSONL"),
                                                    input("descriptors", "descriptors JSONL")})));
  cmds.push_back(command("route", concat(concat(common_params(), routing_params()), {{"lambda", 0.0, "cost penalty"}})));
  cmds.push_back(command("eval", with_grid(concat(common_params(), routing_params()))));
  auto sweep_params = with_grid(concat(common_params(), routing_params()));
  std::erase_if(sweep_params, [](const Param& p) { return p.key == "policy"; });
  sweep_params.push_back({"policies", "cscr,oracle,random,pareto_random,thompson", "comma-separated policies"});
  cmds.push_back(command("sweep", sweep_params));
  auto sig_params = with_grid(concat(common_params(), routing_params()));
  std::erase_if(sig_params, [](const Param& p) { return p.key == "policy"; });
  sig_params.push_back({"policy_a", "cscr", "first policy"});
  sig_params.push_back({"policy_b", "random", "second policy"});
  sig_params.push_back({"n_resamples", std::size_t{1000}, "bootstrap resamples"});
  sig_params.push_back({"bootstrap_seed", std::uint64_t{0}, "bootstrap seed"});
  sig_params.push_back({"budget", -1.0, "McNemar budget; negative means the median of both cost grids"});
  cmds.push_back(command("significance", sig_params));
  auto abl = with_grid(concat(common_params(), routing_params()));
  std::erase_if(abl, [](const Param& p) { return p.key == "policy" || p.key == "head"; });
  for (auto& p : train_params())
    if (p.key != "seed" && p.key != "theta_pos" && p.key != "theta_pos_continuous" && p.key != "threshold_mode")
      abl.push_back(p);
  for (const char* key : {"grid_num_bands", "grid_gamma", "grid_alpha", "grid_tau_min", "grid_k"})
    abl.push_back({key, json::array(), "comma-separated grid values"});
  cmds.push_back(command("ablate", abl));

  const std::map<std::string, std::string> descriptions = {
      {"synth", "generate a planted-truth synthetic pool and query set"},
      {"descriptors", "build expert descriptors from probe outputs"},
      {"train", "train the query projection head"},
      {"index", "build the flat descriptor index"},
      {"route", "route queries at one lambda"},
      {"eval", "sweep lambda for one policy and report metrics"},
      {"sweep", "deferral curves for several policies"},
      {"significance", "paired bootstrap and McNemar tests between two policies"},
      {"ablate", "train and evaluate over a hyperparameter grid"}};
  for (auto& c : cmds) register_command(app, c, descriptions.at(c.name));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  Command* cmd = nullptr;
  for (auto& c : cmds)
    if (c.app->parsed()) cmd = &c;

  try {
    const json cfg = resolve(*cmd);
    const std::string hash = hash_of(*cmd, cfg);
    const fs::path dir = make_run_dir(*cmd, cfg, hash);
    const std::string& n = cmd->name;
    if (n == "synth") cmd_synth(cfg, dir);
    else if (n == "descriptors") cmd_descriptors(cfg, dir);
    else if (n == "train") cmd_train(cfg, dir, hash);
    else if (n == "index") cmd_index(cfg, dir);
    else if (n == "route") cmd_route(cfg, dir);
    else if (n == "eval") cmd_eval(cfg, dir, hash);
    else if (n == "sweep") cmd_sweep(cfg, dir, hash);
    else if (n == "significance") cmd_significance(cfg, dir, hash);
    else if (n == "ablate") cmd_ablate(cfg, dir, hash);
    std::cout << dir.string() << '\n';
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n\n" << cmd->app->help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
