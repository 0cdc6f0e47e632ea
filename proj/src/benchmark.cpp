#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "udic/evalbench.hpp"

namespace udic {

namespace {

bool needs_stage1(Mode m) { return m != Mode::kNone && m != Mode::kAdaptersFirst; }

std::string lambda_list(const std::vector<double>& v) {
  std::string out;
  for (double l : v) out += (out.empty() ? "" : ", ") + std::to_string(l);
  return out.empty() ? "none" : out;
}

std::vector<CodecModel> check_models(const std::vector<CodecModel>& models, int min_models) {
  std::vector<CodecModel> sorted = models;
  std::sort(sorted.begin(), sorted.end(),
            [](const CodecModel& a, const CodecModel& b) { return a.lambda_train < b.lambda_train; });
  std::vector<double> have;
  for (const auto& m : sorted) {
    if (!have.empty() && m.lambda_train == have.back())
      throw std::invalid_argument("two models share lambda " + std::to_string(m.lambda_train));
    have.push_back(m.lambda_train);
  }
  if (sorted.empty() || sorted.size() < static_cast<std::size_t>(min_models)) {
    std::vector<double> missing;
    for (double g : kLambdaGrid)
      if (std::none_of(have.begin(), have.end(), [&](double l) { return lambda_index(l) == lambda_index(g); }))
        missing.push_back(g);
    throw std::invalid_argument("benchmark needs models for at least " + std::to_string(std::max(min_models, 1)) + " lambdas; have [" + lambda_list(have) +
                                "], missing from the grid [" + lambda_list(missing) + "]");
  }
  return sorted;
}

ImageRow make_row(const EncodeResult& r, const Image& x, Domain d, int image, double lambda) {
  ImageRow row;
  row.domain = domain_name(d);
  row.image = image;
  row.mode = mode_name(r.adaptation.mode);
  row.lambda = lambda;
  row.bytes = r.bytes.size();
  row.latent_bytes = r.container.b_l.size();
  row.side_bytes = r.container.b_a.size();
  row.bpp = r.bpp;
  row.mse = distortion(x, r.x_hat_local);
  const double p = psnr_from_mse(row.mse);
  if (std::isfinite(p)) row.psnr = p;
  row.objective = 8.0 * static_cast<double>(row.bytes) / static_cast<double>(x.pixels()) + lambda * row.mse;
  row.adapter_sent = r.container.kind == SideInfoKind::kAdapter;
  row.adapter_bits = row.adapter_sent ? 8.0 * static_cast<double>(row.side_bytes) : 0.0;
  row.diverged = r.adaptation.diverged;
  return row;
}

std::uint64_t cell_seed(std::uint64_t base, std::size_t domain, int image, std::size_t lambda) {
  return base * 0x9E3779B97F4A7C15ull + domain * 1000003ull + static_cast<std::uint64_t>(image) * 7919ull + lambda;
}

std::uint64_t parameter_count(const CodecModel& model, Mode m, int rank) {
  switch (m) {
    case Mode::kBiases: {
      std::uint64_t n = 0;
      for (int l = 0; l < static_cast<int>(model.arch.decoder.size()); ++l)
        n += model.params[model.dec_bias(l)].values.size();
      return n;
    }
    case Mode::kOmps: return static_cast<std::uint64_t>(model.arch.decoder[model.adapter_insertion_index].in_channels);
    case Mode::kOurs: return static_cast<std::uint64_t>(param_count(adapter_config(model, rank)));
    default: return 0;
  }
}

}  // namespace

void summarize(Report& r, BdMethod method) {
  r.summaries.clear();
  r.ordering.reset();
  std::map<std::tuple<std::string, std::string, double>, std::vector<const ImageRow*>> cells;
  for (const auto& row : r.rows) cells[{row.domain, row.mode, row.lambda}].push_back(&row);

  auto curve_of = [&](const std::string& domain, const std::string& mode, bool& finite) {
    RDCurve curve;
    finite = true;
    for (double l : r.lambdas) {
      const auto it = cells.find({domain, mode, l});
      if (it == cells.end()) continue;
      RDPoint p;
      for (const auto* row : it->second) {
        p.bpp += row->bpp;
        if (row->psnr) p.psnr += *row->psnr;
        else finite = false;
      }
      p.bpp /= static_cast<double>(it->second.size());
      p.psnr /= static_cast<double>(it->second.size());
      curve.push_back(p);
    }
    return curve;
  };

  for (const auto& domain : r.domains) {
    bool anchor_finite = true;
    const RDCurve anchor = curve_of(domain, r.anchor, anchor_finite);
    for (const auto& mode : r.modes) {
      ModeSummary s;
      s.domain = domain;
      s.mode = mode;
      bool finite = true;
      s.curve = curve_of(domain, mode, finite);
      try {
        if (!finite || !anchor_finite) throw BdRateError("a reconstruction is lossless (infinite PSNR)");
        s.bd_rate = bd_rate(anchor, s.curve, method);
      } catch (const BdRateError& e) {
        s.bd_error = e.what();
      }
      std::size_t n = 0, sent = 0;
      for (const auto& row : r.rows) {
        if (row.domain != domain || row.mode != mode) continue;
        ++n;
        s.mean_objective += row.objective;
        s.mean_adapter_bits += row.adapter_bits;
        sent += row.adapter_sent ? 1 : 0;
      }
      if (n > 0) {
        s.mean_objective /= static_cast<double>(n);
        s.mean_adapter_bits /= static_cast<double>(n);
        s.adapter_win_fraction = static_cast<double>(sent) / static_cast<double>(n);
      }
      r.summaries.push_back(std::move(s));
    }
  }

  // Ordering ablation: adapters_first rows paired with ours rows.
  std::map<std::tuple<std::string, int, double>, double> ours;
  for (const auto& row : r.rows)
    if (row.mode == mode_name(Mode::kOurs)) ours[{row.domain, row.image, row.lambda}] = row.objective;
  OrderingAblation ab;
  for (const auto& row : r.rows) {
    if (row.mode != mode_name(Mode::kAdaptersFirst)) continue;
    const auto it = ours.find({row.domain, row.image, row.lambda});
    if (it == ours.end()) continue;
    ab.lambda = row.lambda;
    ++ab.images;
    ab.ours_objective += it->second;
    ab.adapters_first_objective += row.objective;
  }
  if (ab.images > 0) {
    ab.ours_objective /= ab.images;
    ab.adapters_first_objective /= ab.images;
    r.ordering = ab;
  }
}

Report run_benchmark(const std::vector<CodecModel>& models_in, const BenchConfig& cfg, const ProgressFn& progress) {
  const auto models = check_models(models_in, cfg.min_models);
  if (cfg.domains.empty()) throw std::invalid_argument("benchmark needs at least one domain");
  if (std::find(cfg.modes.begin(), cfg.modes.end(), Mode::kNone) == cfg.modes.end())
    throw std::invalid_argument("benchmark modes must include the anchor mode none");
  if (cfg.images_per_domain < 1) throw std::invalid_argument("images_per_domain must be >= 1");
  if (cfg.jobs < 1) throw std::invalid_argument("jobs must be >= 1");
  if (cfg.ordering_lambda >= static_cast<int>(models.size()))
    throw std::invalid_argument("ordering_lambda is out of range");
  cfg.adaptation.refine.validate();
  cfg.adaptation.adapter.validate();
  {
    std::set<Mode> seen;
    for (Mode m : cfg.modes)
      if (!seen.insert(m).second) throw std::invalid_argument("duplicate mode " + std::string(mode_name(m)));
  }

  struct Cell {
    std::size_t domain;
    int image;
    std::size_t lambda;
  };
  std::vector<Cell> cells;
  for (std::size_t d = 0; d < cfg.domains.size(); ++d)
    for (int i = 0; i < cfg.images_per_domain; ++i)
      for (std::size_t l = 0; l < models.size(); ++l) cells.push_back({d, i, l});

  std::vector<std::vector<ImageRow>> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  std::size_t done = 0;

  auto work = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= cells.size()) return;
      {
        std::lock_guard lock(mu);
        if (failure) return;
      }
      try {
        const Cell& c = cells[k];
        const Domain domain = cfg.domains[c.domain];
        const CodecModel& model = models[c.lambda];
        const DomainSpec spec{domain, cfg.images_per_domain, cfg.height, cfg.width, cfg.seed};
        const Image x = generate_image(domain, cfg.height, cfg.width, image_seed(spec, c.image));
        AdaptationConfig acfg = cfg.adaptation;
        acfg.refine.seed = cell_seed(cfg.seed, c.domain, c.image, c.lambda);
        acfg.adapter.seed = acfg.refine.seed + 1;

        std::vector<Mode> modes = cfg.modes;
        if (static_cast<int>(c.lambda) == cfg.ordering_lambda &&
            std::find(modes.begin(), modes.end(), Mode::kAdaptersFirst) == modes.end())
          modes.push_back(Mode::kAdaptersFirst);
        std::optional<RefineResult> stage1;
        if (std::any_of(modes.begin(), modes.end(), needs_stage1)) stage1 = refine_latent(model, x, acfg.refine);
        for (Mode m : modes) {
          const auto r = encode_image(model, x, m, acfg, stage1 ? &*stage1 : nullptr);
          results[k].push_back(make_row(r, x, domain, c.image, model.lambda_train));
        }
        std::lock_guard lock(mu);
        ++done;
        if (progress)
          progress("cell " + std::to_string(done) + "/" + std::to_string(cells.size()) + ": " +
                   std::string(domain_name(domain)) + " image " + std::to_string(c.image) + " lambda " +
                   std::to_string(model.lambda_train));
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (cfg.jobs == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < cfg.jobs; ++j) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  Report report;
  report.bd_method = bd_method_name(cfg.bd_method);
  for (const auto& m : models) report.lambdas.push_back(m.lambda_train);
  for (Domain d : cfg.domains) report.domains.emplace_back(domain_name(d));
  for (Mode m : cfg.modes) report.modes.emplace_back(mode_name(m));
  report.images_per_domain = cfg.images_per_domain;
  report.height = cfg.height;
  report.width = cfg.width;
  report.seed = cfg.seed;
  report.adaptation_config = format_config(cfg.adaptation);

  // Ordered by (domain, mode, lambda, image).
  std::vector<std::string> mode_order = report.modes;
  mode_order.emplace_back(mode_name(Mode::kAdaptersFirst));
  auto rank = [](const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) - v.begin();
  };
  for (auto& cell : results)
    for (auto& row : cell) report.rows.push_back(std::move(row));
  std::stable_sort(report.rows.begin(), report.rows.end(), [&](const ImageRow& a, const ImageRow& b) {
    return std::tuple(rank(report.domains, a.domain), rank(mode_order, a.mode), a.lambda, a.image) <
           std::tuple(rank(report.domains, b.domain), rank(mode_order, b.mode), b.lambda, b.image);
  });
  summarize(report, cfg.bd_method);

  const std::pair<Mode, const char*> classes[] = {
      {Mode::kLatentOnly, "zero"}, {Mode::kBiases, "biases"}, {Mode::kOmps, "omps"}, {Mode::kOurs, "adapters"}};
  for (const auto& [mode, name] : classes) {
    if (std::find(cfg.modes.begin(), cfg.modes.end(), mode) == cfg.modes.end()) continue;
    ParamClassRow row;
    row.parameters = name;
    row.mode = mode_name(mode);
    row.count = parameter_count(models.front(), mode, cfg.adaptation.adapter.rank);
    double bd = 0, obj = 0;
    int n_bd = 0, n = 0;
    for (const auto& s : report.summaries) {
      if (s.mode != row.mode) continue;
      obj += s.mean_objective;
      ++n;
      if (s.bd_rate) {
        bd += *s.bd_rate;
        ++n_bd;
      }
    }
    if (n_bd > 0) row.bd_rate = bd / n_bd;
    row.mean_objective = n > 0 ? obj / n : 0;
    report.parameter_classes.push_back(row);
  }
  return report;
}

}  // namespace udic
