#include "driftlab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>

namespace driftlab {

double order_free_sum(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

MeanStderr mean_stderr(const std::vector<double>& values) {
  MeanStderr m;
  m.n = values.size();
  if (values.empty()) return m;
  m.mean = order_free_sum(values) / static_cast<double>(values.size());
  if (values.size() > 1) {
    std::vector<double> sq;
    sq.reserve(values.size());
    for (double v : values) sq.push_back((v - m.mean) * (v - m.mean));
    const double var = order_free_sum(std::move(sq)) / static_cast<double>(values.size() - 1);
    m.stderr_ = std::sqrt(var / static_cast<double>(values.size()));
  }
  return m;
}

SinkReport detect_sink(const std::vector<AttentionMaps>& maps, const SinkDetectionConfig& config) {
  if (maps.size() < config.min_prompts) {
    throw InsufficientData("detect_sink: need at least " + std::to_string(config.min_prompts) + " prompts, got " +
                           std::to_string(maps.size()));
  }
  std::size_t shortest = SIZE_MAX;
  for (const auto& m : maps) {
    if (m.n_queries != m.n_keys) throw InsufficientData("detect_sink: maps must be full self-attention");
    shortest = std::min(shortest, m.n_keys);
  }
  if (shortest < config.min_length) {
    throw InsufficientData("detect_sink: prompts must have at least " + std::to_string(config.min_length) +
                           " positions, shortest has " + std::to_string(shortest));
  }
  const std::size_t candidates = shortest / 2;
  const std::size_t layers = maps.front().n_layers;
  SinkReport report;
  report.n_prompts = maps.size();
  report.threshold = config.threshold;
  report.per_layer.assign(layers, std::vector<double>(candidates, 0.0));

  // received[p][prompt]: mean over layers, heads and late queries.
  std::vector<std::vector<double>> received(candidates), layer_received(layers * candidates);
  for (const auto& m : maps) {
    if (m.n_layers != layers) throw AlignmentError("detect_sink: maps disagree on layer count");
    const std::size_t L = m.n_keys, q0 = L / 2;
    for (std::size_t p = 0; p < candidates; ++p) {
      double all = 0.0;
      for (std::size_t l = 0; l < layers; ++l) {
        double layer_sum = 0.0;
        for (std::size_t h = 0; h < m.n_heads; ++h)
          for (std::size_t q = q0; q < L; ++q) layer_sum += m.at(l, h, q, p);
        layer_sum /= static_cast<double>(m.n_heads * (L - q0));
        layer_received[l * candidates + p].push_back(layer_sum);
        all += layer_sum;
      }
      received[p].push_back(all / static_cast<double>(layers));
    }
  }
  for (std::size_t p = 0; p < candidates; ++p) {
    const auto ms = mean_stderr(received[p]);
    report.profile.push_back(ms.mean);
    report.profile_stderr.push_back(ms.stderr_);
    for (std::size_t l = 0; l < layers; ++l) report.per_layer[l][p] = mean_stderr(layer_received[l * candidates + p]).mean;
    if (!report.position && ms.mean > config.threshold) report.position = static_cast<int>(p);
  }
  return report;
}

StepAttention step_attention(const SpecStep& step, std::optional<int> sink_pos) {
  const auto& row = step.attention_row;
  if (row.size() != step.key_positions.size() || row.empty() || step.prompt_keys >= row.size()) {
    throw AlignmentError("step_attention: attention row does not match the step's keys");
  }
  StepAttention a;
  if (sink_pos) {
    double s = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i)
      if (step.key_positions[i] == *sink_pos) s += row[i];
    a.sink = s;
  }
  a.latest = row.back();
  std::vector<double> chain(row.begin() + static_cast<std::ptrdiff_t>(step.prompt_keys), row.end());
  a.chain = order_free_sum(std::move(chain));
  a.entropy = attention_entropy(row);
  a.support = std::exp(a.entropy);
  return a;
}

DriftMetrics drift_metrics(const std::vector<SpecChainTrace>& traces, std::optional<int> sink_pos, bool per_head,
                           std::size_t n_heads) {
  if (traces.empty()) throw InsufficientData("drift_metrics: no traces");
  DriftMetrics m;
  m.k = static_cast<int>(traces.front().steps.size());
  m.n_traces = traces.size();
  m.has_sink = sink_pos.has_value();
  if (m.k == 0) throw InsufficientData("drift_metrics: traces have no steps");
  const auto K = static_cast<std::size_t>(m.k);
  std::vector<std::vector<double>> sink(K), latest(K), chain(K), entropy(K), support(K), rms(K);
  std::vector<std::vector<std::vector<double>>> head_sink(K, std::vector<std::vector<double>>(n_heads));
  for (const auto& t : traces) {
    if (t.steps.size() != K) throw AlignmentError("drift_metrics: traces differ in chain depth");
    for (std::size_t j = 0; j < K; ++j) {
      const auto& s = t.steps[j];
      const auto a = step_attention(s, sink_pos);
      if (a.sink) sink[j].push_back(*a.sink);
      latest[j].push_back(a.latest);
      chain[j].push_back(a.chain);
      entropy[j].push_back(a.entropy);
      support[j].push_back(a.support);
      rms[j].push_back(s.h_rms);
      if (per_head && sink_pos) {
        const std::size_t nk = s.key_positions.size();
        if (s.head_rows.size() != n_heads * nk) throw AlignmentError("drift_metrics: head rows do not match n_heads");
        for (std::size_t h = 0; h < n_heads; ++h) {
          double v = 0.0;
          for (std::size_t i = 0; i < nk; ++i)
            if (s.key_positions[i] == *sink_pos) v += s.head_rows[h * nk + i];
          head_sink[j][h].push_back(v);
        }
      }
    }
  }
  for (std::size_t j = 0; j < K; ++j) {
    if (sink_pos) m.sink_frac.push_back(mean_stderr(sink[j]));
    m.latest_frac.push_back(mean_stderr(latest[j]));
    m.chain_frac.push_back(mean_stderr(chain[j]));
    m.entropy.push_back(mean_stderr(entropy[j]));
    m.effective_support.push_back(mean_stderr(support[j]));
    m.rms.push_back(mean_stderr(rms[j]));
    if (per_head && sink_pos) {
      std::vector<double> row;
      for (std::size_t h = 0; h < n_heads; ++h) row.push_back(mean_stderr(head_sink[j][h]).mean);
      m.head_sink_frac.push_back(std::move(row));
    }
  }
  return m;
}

Heatmap heatmap(const std::vector<SpecChainTrace>& traces, std::size_t prompt_columns) {
  if (traces.empty()) throw InsufficientData("heatmap: no traces");
  const std::size_t K = traces.front().steps.size();
  std::size_t widest = 0;
  for (const auto& t : traces) {
    if (t.steps.size() != K) throw AlignmentError("heatmap: traces differ in chain depth");
    for (std::size_t j = 0; j < K; ++j) {
      const auto& s = t.steps[j];
      if (s.attention_row.size() != s.prompt_keys + j + 1 || s.prompt_keys != t.steps.front().prompt_keys) {
        throw AlignmentError("heatmap: step " + std::to_string(j + 1) + " keys are not prompt keys plus " +
                             std::to_string(j + 1) + " chain entries");
      }
    }
    widest = std::max(widest, t.steps.empty() ? 0 : t.steps.front().prompt_keys);
  }
  if (prompt_columns == 0) prompt_columns = widest;
  if (prompt_columns < widest) {
    throw AlignmentError("heatmap: " + std::to_string(prompt_columns) + " prompt columns cannot hold a prompt with " +
                         std::to_string(widest) + " keys");
  }
  Heatmap h;
  h.rows = K;
  h.prompt_columns = prompt_columns;
  h.chain_columns = K;
  h.n_traces = traces.size();
  std::vector<std::vector<double>> cells(K * h.cols());
  for (const auto& t : traces)
    for (std::size_t j = 0; j < K; ++j) {
      const auto& s = t.steps[j];
      const std::size_t offset = prompt_columns - s.prompt_keys;
      std::vector<double> row(h.cols(), 0.0);
      for (std::size_t i = 0; i < s.attention_row.size(); ++i) {
        const std::size_t col = i < s.prompt_keys ? offset + i : prompt_columns + (i - s.prompt_keys);
        row[col] = s.attention_row[i];
      }
      for (std::size_t c = 0; c < h.cols(); ++c) cells[j * h.cols() + c].push_back(row[c]);
    }
  h.values.resize(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    h.values[i] = order_free_sum(std::move(cells[i])) / static_cast<double>(traces.size());
  }
  return h;
}

void write_heatmap(std::ostream& os, const Heatmap& h) {
  os << "# rows=" << h.rows << " prompt_columns=" << h.prompt_columns << " chain_columns=" << h.chain_columns
     << " traces=" << h.n_traces << " alignment=prompt_right\n";
  os << std::setprecision(10);
  for (std::size_t r = 0; r < h.rows; ++r) {
    for (std::size_t c = 0; c < h.cols(); ++c) os << (c ? "," : "") << h.at(r, c);
    os << '\n';
  }
}

void write_drift_csv(std::ostream& os, const DriftMetrics& m, const std::string& experiment, const std::string& variant,
                     bool write_header) {
  if (write_header) {
    os << "experiment,variant,step,n,sink_frac,sink_frac_se,latest_frac,latest_frac_se,chain_frac,chain_frac_se,"
          "entropy,entropy_se,effective_support,effective_support_se,rms,rms_se\n";
  }
  os << std::setprecision(10);
  auto pair = [&](const MeanStderr& v) { os << ',' << v.mean << ',' << v.stderr_; };
  for (std::size_t j = 0; j < static_cast<std::size_t>(m.k); ++j) {
    os << experiment << ',' << variant << ',' << j + 1 << ',' << m.n_traces;
    if (m.has_sink) {
      pair(m.sink_frac[j]);
    } else {
      os << ",,";
    }
    pair(m.latest_frac[j]);
    pair(m.chain_frac[j]);
    pair(m.entropy[j]);
    pair(m.effective_support[j]);
    pair(m.rms[j]);
    os << '\n';
  }
}

}  // namespace driftlab
