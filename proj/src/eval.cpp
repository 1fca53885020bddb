#include "vlkd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace vlkd {

Vector mean_content_state(const HiddenStates& h, bool include_cls) {
  auto rows = h.content_positions();
  if (rows.empty()) throw Error("sentence embedding of a sequence with no content tokens");
  if (include_cls && h.rows() > 0 && !h.content[0]) rows.insert(rows.begin(), 0);
  Vector sum = Vector::Zero(h.states.cols());
  for (int r : rows) sum += h.states.row(r).transpose();
  return sum / static_cast<double>(rows.size());
}

Vector sentence_embedding(const EncoderModel& model, const TokenSequence& seq, bool include_cls) {
  if (seq.length < 1) throw Error("sentence embedding of a sequence with no content tokens");
  return mean_content_state(encode_text(model, seq), include_cls);
}

nlohmann::json RetrievalResult::to_json() const {
  nlohmann::json topk_json = nlohmann::json::array();
  for (auto& hit : topk) topk_json.push_back({{"video_id", hit.video_id}, {"score", hit.score}});
  return {{"query_id", query_id}, {"topk", topk_json}, {"gt_rank", gt_rank}};
}

RetrievalResult rank_videos(const Vector& query, const Matrix& bank, const std::vector<std::string>& ids, int k,
                            const std::string& query_id, const std::string& gt_id) {
  if (bank.rows() == 0) throw Error("retrieval against an empty bank");
  if (static_cast<Eigen::Index>(ids.size()) != bank.rows()) throw Error("bank ids and rows differ in count");
  if (k < 1 || k > bank.rows()) throw Error("retrieval k must lie in [1, bank size]");
  if (query.size() != bank.cols()) throw Error("query and bank dimensions differ");

  std::vector<RetrievalHit> all;
  all.reserve(ids.size());
  for (Eigen::Index i = 0; i < bank.rows(); ++i)
    all.push_back({ids[i], cosine(query, Vector(bank.row(i).transpose()))});
  std::sort(all.begin(), all.end(), [](const RetrievalHit& a, const RetrievalHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.video_id < b.video_id;
  });

  RetrievalResult out;
  out.query_id = query_id;
  if (!gt_id.empty()) {
    for (std::size_t i = 0; i < all.size(); ++i)
      if (all[i].video_id == gt_id) {
        out.gt_rank = static_cast<int>(i) + 1;
        break;
      }
    if (out.gt_rank == 0) throw Error("ground-truth video " + gt_id + " is not in the bank");
  }
  all.resize(static_cast<std::size_t>(k));
  out.topk = std::move(all);
  return out;
}

RetrievalResult retrieve_videos(const EncoderModel& text_model, const TokenSequence& seq, const VokenBank& bank, int k,
                                const std::string& query_id, const std::string& gt_id) {
  return rank_videos(sentence_embedding(text_model, seq), bank.rows, bank.ids, k, query_id, gt_id);
}

VokenBank pooled_video_bank(const EncoderModel& video_model, const std::vector<PairedSample>& data) {
  VokenBank bank;
  bank.rows.resize(static_cast<Eigen::Index>(data.size()), video_model.config.d_hidden);
  for (std::size_t i = 0; i < data.size(); ++i) {
    bank.rows.row(static_cast<Eigen::Index>(i)) = pool_video(encode_video(video_model, data[i].video)).transpose();
    bank.ids.push_back(data[i].video.source_id.empty() ? std::to_string(data[i].sample_index)
                                                       : data[i].video.source_id);
  }
  return bank;
}

RetrievalSummary evaluate_retrieval(const EncoderModel& text_model, const EncoderModel& video_model,
                                    const std::vector<PairedSample>& data, int k) {
  const VokenBank bank = pooled_video_bank(video_model, data);
  RetrievalSummary summary;
  summary.k = k;
  int hit1 = 0, hitk = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto r = retrieve_videos(text_model, data[i].text, bank, k, "q" + std::to_string(data[i].sample_index),
                             bank.ids[i]);
    hit1 += r.gt_rank == 1;
    hitk += r.gt_rank <= k;
    summary.results.push_back(std::move(r));
  }
  summary.recall_at_1 = static_cast<double>(hit1) / static_cast<double>(data.size());
  summary.recall_at_k = static_cast<double>(hitk) / static_cast<double>(data.size());
  return summary;
}

void ProbeTask::validate() const {
  if (num_classes < 2) throw Error("probe task needs at least two classes");
  if (train.size() != train_labels.size() || test.size() != test_labels.size())
    throw Error("probe task sentences and labels differ in count");
  for (const auto* labels : {&train_labels, &test_labels}) {
    std::vector<int> counts(num_classes, 0);
    for (int y : *labels) {
      if (y < 0 || y >= num_classes) throw Error("probe label out of range");
      ++counts[y];
    }
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    if (*lo == 0) throw Error("probe task split is missing a class");
    if (*hi - *lo > 0.1 * *hi) throw Error("probe task classes are unbalanced");
  }
}

ProbeTask make_probe_task(const SyntheticDataset& data, std::uint64_t seed, const ProbeTaskOptions& opts) {
  const auto& g = data.grounding;
  ProbeTask task;
  task.num_classes = g.num_clusters;
  Rng rng = make_rng(seed, 301);
  std::set<std::string> seen;
  const int per_class = opts.train_per_class + opts.test_per_class;
  const int max_attempts = 1000 * per_class;
  for (int c = 0; c < g.num_clusters; ++c) {
    int made = 0;
    for (int attempt = 0; made < per_class; ++attempt) {
      if (attempt >= max_attempts) throw Error("could not draw enough distinct probe sentences");
      const auto words = sample_sentence_words(data.config, g, c, rng);
      if (dominant_cluster(g, words, c) != c) continue;
      const auto text = words_to_text(g, words);
      if (!seen.insert(text).second) continue;
      const bool to_train = made < opts.train_per_class;
      (to_train ? task.train : task.test).push_back(tokenize(text, data.vocab));
      (to_train ? task.train_labels : task.test_labels).push_back(c);
      ++made;
    }
  }
  task.validate();
  return task;
}

double linear_probe_accuracy(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& test_x,
                             const std::vector<int>& test_y, int num_classes, const ProbeOptions& opts) {
  if (num_classes < 2) throw Error("probe needs at least two classes");
  if (std::set<int>(train_y.begin(), train_y.end()).size() < 2) throw Error("probe training set has a single class");
  if (static_cast<Eigen::Index>(train_y.size()) != train_x.rows() ||
      static_cast<Eigen::Index>(test_y.size()) != test_x.rows())
    throw Error("probe features and labels differ in count");
  if (test_y.empty()) throw Error("probe test set is empty");

  const Eigen::Index n = train_x.rows(), d = train_x.cols();
  Matrix w = Matrix::Zero(d, num_classes);
  RowVector b = RowVector::Zero(num_classes);
  Matrix onehot = Matrix::Zero(n, num_classes);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, train_y[i]) = 1.0;

  for (int step = 0; step < opts.steps; ++step) {
    Matrix logits = (train_x * w).rowwise() + b;
    Vector mx = logits.rowwise().maxCoeff();
    Matrix p = (logits.colwise() - mx).array().exp().matrix();
    p.array().colwise() /= p.rowwise().sum().array();
    const Matrix d_logits = (p - onehot) / static_cast<double>(n);
    w -= opts.lr * (train_x.transpose() * d_logits);
    b -= opts.lr * d_logits.colwise().sum();
  }

  const Matrix logits = (test_x * w).rowwise() + b;
  int correct = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best;
    logits.row(i).maxCoeff(&best);
    correct += static_cast<int>(best) == test_y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(test_y.size());
}

namespace {

Matrix embed_all(const EncoderModel& model, const std::vector<TokenSequence>& seqs, bool include_cls) {
  Matrix out(static_cast<Eigen::Index>(seqs.size()), model.config.d_hidden);
  for (std::size_t i = 0; i < seqs.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = sentence_embedding(model, seqs[i], include_cls).transpose();
  return out;
}

}  // namespace

double probe_eval(const EncoderModel& model, const ProbeTask& task, const ProbeOptions& opts) {
  task.validate();
  return linear_probe_accuracy(embed_all(model, task.train, opts.include_cls), task.train_labels,
                               embed_all(model, task.test, opts.include_cls), task.test_labels, task.num_classes,
                               opts);
}

Agreement agreement_metrics(const EncoderModel& student, const EncoderModel& teacher,
                            const std::vector<TokenSequence>& texts, bool use_head) {
  Agreement out;
  double l2 = 0.0, cos = 0.0;
  for (const auto& seq : texts) {
    Matrix s = encode_text(student, seq).content_rows();
    if (use_head && student.config.distill_head) s = distill_head(student, s).out;
    const Matrix t = encode_text(teacher, seq).content_rows();
    if (s.cols() != t.cols()) throw Error("student and teacher feature sizes differ");
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      l2 += (s.row(i) - t.row(i)).norm();
      cos += cosine(RowVector(s.row(i)), RowVector(t.row(i)));
      ++out.positions;
    }
  }
  if (out.positions > 0) {
    out.mean_l2 = l2 / static_cast<double>(out.positions);
    out.mean_cosine = cos / static_cast<double>(out.positions);
  }
  return out;
}

}  // namespace vlkd
