#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "udic/evalbench.hpp"

namespace udic {

namespace {

using Json = nlohmann::ordered_json;

template <class T>
Json optional_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

template <class T>
std::optional<T> optional_from(const Json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<T>();
}

Json curve_json(const RDCurve& c) {
  Json out = Json::array();
  for (const auto& p : c) out.push_back({{"bpp", p.bpp}, {"psnr", p.psnr}});
  return out;
}

RDCurve curve_from(const Json& j) {
  RDCurve c;
  for (const auto& p : j) c.push_back({p.at("bpp").get<double>(), p.at("psnr").get<double>()});
  return c;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

}  // namespace

std::string emit_report(const Report& r) {
  Json j;
  j["version"] = r.version;
  j["anchor"] = r.anchor;
  j["bd_method"] = r.bd_method;
  j["lambdas"] = r.lambdas;
  j["domains"] = r.domains;
  j["modes"] = r.modes;
  j["images_per_domain"] = r.images_per_domain;
  j["height"] = r.height;
  j["width"] = r.width;
  j["seed"] = r.seed;
  j["adaptation_config"] = r.adaptation_config;
  Json rows = Json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"domain", row.domain},
                    {"image", row.image},
                    {"mode", row.mode},
                    {"lambda", row.lambda},
                    {"bytes", row.bytes},
                    {"latent_bytes", row.latent_bytes},
                    {"side_bytes", row.side_bytes},
                    {"bpp", row.bpp},
                    {"psnr", optional_json(row.psnr)},
                    {"mse", row.mse},
                    {"objective", row.objective},
                    {"adapter_sent", row.adapter_sent},
                    {"adapter_bits", row.adapter_bits},
                    {"diverged", row.diverged}});
  j["rows"] = std::move(rows);
  Json sums = Json::array();
  for (const auto& s : r.summaries)
    sums.push_back({{"domain", s.domain},
                    {"mode", s.mode},
                    {"curve", curve_json(s.curve)},
                    {"bd_rate", optional_json(s.bd_rate)},
                    {"bd_error", s.bd_error},
                    {"mean_objective", s.mean_objective},
                    {"mean_adapter_bits", s.mean_adapter_bits},
                    {"adapter_win_fraction", s.adapter_win_fraction}});
  j["summaries"] = std::move(sums);
  Json classes = Json::array();
  for (const auto& c : r.parameter_classes)
    classes.push_back({{"parameters", c.parameters},
                       {"mode", c.mode},
                       {"count", c.count},
                       {"bd_rate", optional_json(c.bd_rate)},
                       {"mean_objective", c.mean_objective}});
  j["parameter_classes"] = std::move(classes);
  if (r.ordering)
    j["ordering"] = {{"lambda", r.ordering->lambda},
                     {"images", r.ordering->images},
                     {"ours_objective", r.ordering->ours_objective},
                     {"adapters_first_objective", r.ordering->adapters_first_objective}};
  else
    j["ordering"] = nullptr;
  return j.dump(2) + "\n";
}

Report parse_report(std::string_view text) {
  try {
    const Json j = Json::parse(text);
    Report r;
    r.version = j.at("version").get<int>();
    if (r.version != kReportVersion) throw std::invalid_argument("unsupported report version " + std::to_string(r.version));
    r.anchor = j.at("anchor").get<std::string>();
    r.bd_method = j.at("bd_method").get<std::string>();
    r.lambdas = j.at("lambdas").get<std::vector<double>>();
    r.domains = j.at("domains").get<std::vector<std::string>>();
    r.modes = j.at("modes").get<std::vector<std::string>>();
    r.images_per_domain = j.at("images_per_domain").get<int>();
    r.height = j.at("height").get<int>();
    r.width = j.at("width").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.adaptation_config = j.at("adaptation_config").get<std::string>();
    for (const auto& x : j.at("rows")) {
      ImageRow row;
      row.domain = x.at("domain").get<std::string>();
      row.image = x.at("image").get<int>();
      row.mode = x.at("mode").get<std::string>();
      row.lambda = x.at("lambda").get<double>();
      row.bytes = x.at("bytes").get<std::uint64_t>();
      row.latent_bytes = x.at("latent_bytes").get<std::uint64_t>();
      row.side_bytes = x.at("side_bytes").get<std::uint64_t>();
      row.bpp = x.at("bpp").get<double>();
      row.psnr = optional_from<double>(x.at("psnr"));
      row.mse = x.at("mse").get<double>();
      row.objective = x.at("objective").get<double>();
      row.adapter_sent = x.at("adapter_sent").get<bool>();
      row.adapter_bits = x.at("adapter_bits").get<double>();
      row.diverged = x.at("diverged").get<bool>();
      r.rows.push_back(std::move(row));
    }
    for (const auto& x : j.at("summaries")) {
      ModeSummary s;
      s.domain = x.at("domain").get<std::string>();
      s.mode = x.at("mode").get<std::string>();
      s.curve = curve_from(x.at("curve"));
      s.bd_rate = optional_from<double>(x.at("bd_rate"));
      s.bd_error = x.at("bd_error").get<std::string>();
      s.mean_objective = x.at("mean_objective").get<double>();
      s.mean_adapter_bits = x.at("mean_adapter_bits").get<double>();
      s.adapter_win_fraction = x.at("adapter_win_fraction").get<double>();
      r.summaries.push_back(std::move(s));
    }
    for (const auto& x : j.at("parameter_classes")) {
      ParamClassRow c;
      c.parameters = x.at("parameters").get<std::string>();
      c.mode = x.at("mode").get<std::string>();
      c.count = x.at("count").get<std::uint64_t>();
      c.bd_rate = optional_from<double>(x.at("bd_rate"));
      c.mean_objective = x.at("mean_objective").get<double>();
      r.parameter_classes.push_back(std::move(c));
    }
    const auto& o = j.at("ordering");
    if (!o.is_null())
      r.ordering = OrderingAblation{o.at("lambda").get<double>(), o.at("images").get<int>(),
                                    o.at("ours_objective").get<double>(),
                                    o.at("adapters_first_objective").get<double>()};
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("malformed report: ") + e.what());
  }
}

std::string format_tables(const Report& r) {
  std::string out;
  out += "BD-rate vs anchor '" + r.anchor + "' (" + r.bd_method + " fit over the common PSNR interval)\n";
  for (const auto& domain : r.domains) {
    out += "\n[" + domain + "]\n";
    out += pad("mode", 16) + pad("BD-rate %", 12) + pad("objective", 12) + pad("adapter win", 13) + "curve (bpp/PSNR)\n";
    for (const auto& s : r.summaries) {
      if (s.domain != domain) continue;
      std::string curve;
      for (const auto& p : s.curve) curve += fixed(p.bpp, 3) + "/" + fixed(p.psnr, 2) + "  ";
      out += pad(s.mode, 16) + pad(s.bd_rate ? fixed(*s.bd_rate, 2) : "n/a", 12) + pad(fixed(s.mean_objective, 4), 12) +
             pad(fixed(100 * s.adapter_win_fraction, 1) + "%", 13) + curve + "\n";
      if (!s.bd_rate) out += "  (" + s.bd_error + ")\n";
    }
  }
  if (!r.parameter_classes.empty()) {
    out += "\nUpdated parameters\n" + pad("class", 12) + pad("count", 10) + pad("BD-rate %", 12) + "objective\n";
    for (const auto& c : r.parameter_classes)
      out += pad(c.parameters, 12) + pad(std::to_string(c.count), 10) + pad(c.bd_rate ? fixed(*c.bd_rate, 2) : "n/a", 12) +
             fixed(c.mean_objective, 4) + "\n";
  }
  if (r.ordering) {
    const auto& o = *r.ordering;
    out += "\nOptimization order at lambda " + fixed(o.lambda, 4) + " over " + std::to_string(o.images) +
           " images: latent then adapters " + fixed(o.ours_objective, 4) + ", adapters then latent " +
           fixed(o.adapters_first_objective, 4) + "\n";
  }
  return out;
}

}  // namespace udic
