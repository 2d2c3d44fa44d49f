#include "dsatrack/metrics.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace dsa {

double success_threshold(int k) { return static_cast<double>(k) / kSuccessSteps; }

MetricReport precision_success(const std::vector<FrameBox>& pred, const std::vector<FrameBox>& gt) {
  if (pred.size() != gt.size()) {
    throw ValidationError("precision_success: " + std::to_string(pred.size()) + " predictions vs " +
                          std::to_string(gt.size()) + " ground-truth boxes");
  }
  if (pred.empty()) throw ValidationError("precision_success: empty sequence");
  MetricReport r;
  r.frames = static_cast<int>(pred.size());
  r.precision.assign(kPrecisionMaxPx + 1, 0.0);
  r.success.assign(kSuccessSteps + 1, 0.0);
  // absorbs rounding in box arithmetic, e.g. (x + w) - x != w, so identical boxes reach IoU 1
  constexpr double kSlack = 1e-9;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double err = center_error(pred[i], gt[i]);
    const double ov = frame_iou(pred[i], gt[i]);
    for (int k = 0; k <= kPrecisionMaxPx; ++k)
      if (err <= k + kSlack) r.precision[k] += 1.0;
    for (int k = 0; k <= kSuccessSteps; ++k)
      if (ov >= success_threshold(k) - kSlack) r.success[k] += 1.0;
  }
  for (double& v : r.precision) v /= r.frames;
  for (double& v : r.success) v /= r.frames;
  r.precision_at_20 = r.precision[20];
  double acc = 0.0;
  for (double v : r.success) acc += v;
  r.success_auc = acc / r.success.size();
  return r;
}

MetricReport mean_report(const std::vector<const MetricReport*>& reports) {
  if (reports.empty()) throw ValidationError("mean_report: no sequences");
  MetricReport m;
  m.precision.assign(kPrecisionMaxPx + 1, 0.0);
  m.success.assign(kSuccessSteps + 1, 0.0);
  for (const MetricReport* r : reports) {
    for (std::size_t k = 0; k < m.precision.size(); ++k) m.precision[k] += r->precision[k];
    for (std::size_t k = 0; k < m.success.size(); ++k) m.success[k] += r->success[k];
    m.precision_at_20 += r->precision_at_20;
    m.success_auc += r->success_auc;
    m.frames += r->frames;
  }
  const double n = static_cast<double>(reports.size());
  for (double& v : m.precision) v /= n;
  for (double& v : m.success) v /= n;
  m.precision_at_20 /= n;
  m.success_auc /= n;
  return m;
}

SuiteReport summarize(std::vector<SequenceResult> results) {
  SuiteReport s;
  std::vector<const MetricReport*> all;
  std::map<std::string, std::vector<const MetricReport*>> by_tag;
  for (const auto& r : results) {
    all.push_back(&r.metrics);
    for (const auto& a : r.attributes) by_tag[a].push_back(&r.metrics);
  }
  s.overall = mean_report(all);
  for (const auto& [tag, list] : by_tag) {
    s.per_attribute[tag] = mean_report(list);
    s.attribute_counts[tag] = static_cast<int>(list.size());
  }
  s.sequences = std::move(results);
  return s;
}

void write_metrics_csv(const std::filesystem::path& path, const MetricReport& r) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << "kind,threshold,value\n";
  char buf[96];
  for (std::size_t k = 0; k < r.precision.size(); ++k) {
    std::snprintf(buf, sizeof buf, "precision,%zu,%.6f\n", k, r.precision[k]);
    out << buf;
  }
  for (std::size_t k = 0; k < r.success.size(); ++k) {
    std::snprintf(buf, sizeof buf, "success,%.2f,%.6f\n", success_threshold(static_cast<int>(k)), r.success[k]);
    out << buf;
  }
}

namespace {

// one panel: axes, ticks and a polyline; x and y are in data units
std::string panel(double ox, double oy, double w, double h, const std::vector<double>& xs, const std::vector<double>& ys,
                  double xmax, const std::string& xlabel, const std::string& caption) {
  std::ostringstream s;
  char buf[160];
  std::snprintf(buf, sizeof buf, "<rect x='%.1f' y='%.1f' width='%.1f' height='%.1f' fill='none' stroke='#333'/>\n", ox,
                oy, w, h);
  s << buf;
  for (int i = 0; i <= 4; ++i) {
    const double fy = oy + h - h * i / 4.0;
    std::snprintf(buf, sizeof buf, "<text x='%.1f' y='%.1f' font-size='10' text-anchor='end'>%.2f</text>\n", ox - 4,
                  fy + 3, i / 4.0);
    s << buf;
    const double fx = ox + w * i / 4.0;
    std::snprintf(buf, sizeof buf, "<text x='%.1f' y='%.1f' font-size='10' text-anchor='middle'>%g</text>\n", fx,
                  oy + h + 14, xmax * i / 4.0);
    s << buf;
  }
  s << "<polyline fill='none' stroke='#c0392b' stroke-width='2' points='";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.1f,%.1f ", ox + w * xs[i] / xmax, oy + h - h * ys[i]);
    s << buf;
  }
  s << "'/>\n";
  std::snprintf(buf, sizeof buf, "<text x='%.1f' y='%.1f' font-size='11' text-anchor='middle'>", ox + w / 2,
                oy + h + 30);
  s << buf << xlabel << "</text>\n";
  std::snprintf(buf, sizeof buf, "<text x='%.1f' y='%.1f' font-size='12' text-anchor='middle'>", ox + w / 2, oy - 8);
  s << buf << caption << "</text>\n";
  return s.str();
}

std::string xml_escape(const std::string& in) {
  std::string out;
  for (char c : in) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

void write_metrics_svg(const std::filesystem::path& path, const MetricReport& r, const std::string& title) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  std::vector<double> px, sx;
  for (std::size_t k = 0; k < r.precision.size(); ++k) px.push_back(static_cast<double>(k));
  for (std::size_t k = 0; k < r.success.size(); ++k) sx.push_back(success_threshold(static_cast<int>(k)));
  char cap[96];
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='720' height='340' font-family='sans-serif'>\n";
  out << "<text x='360' y='20' font-size='14' text-anchor='middle'>" << xml_escape(title) << "</text>\n";
  std::snprintf(cap, sizeof cap, "Precision (@20px = %.3f)", r.precision_at_20);
  out << panel(60, 50, 260, 230, px, r.precision, kPrecisionMaxPx, "center error threshold (px)", cap);
  std::snprintf(cap, sizeof cap, "Success (AUC = %.3f)", r.success_auc);
  out << panel(420, 50, 260, 230, sx, r.success, 1.0, "overlap threshold", cap);
  out << "</svg>\n";
}

std::string summary_json(const SuiteReport& s) {
  using nlohmann::json;
  auto brief = [](const MetricReport& r) {
    return json{{"precision@20", r.precision_at_20}, {"success_auc", r.success_auc}, {"frames", r.frames}};
  };
  json j = brief(s.overall);
  j["sequences"] = s.sequences.size();
  json attrs = json::object();
  for (const auto& [tag, r] : s.per_attribute) {
    json a = brief(r);
    a["sequences"] = s.attribute_counts.at(tag);
    attrs[tag] = a;
  }
  j["per_attribute"] = attrs;
  json seqs = json::array();
  for (const auto& r : s.sequences) {
    json e = brief(r.metrics);
    e["name"] = r.name;
    e["attributes"] = r.attributes;
    seqs.push_back(e);
  }
  j["per_sequence"] = seqs;
  return j.dump(2);
}

}  // namespace dsa
