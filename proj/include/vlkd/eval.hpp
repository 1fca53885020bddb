#pragma once

#include "vlkd/corpus.hpp"
#include "vlkd/encoder.hpp"
#include "vlkd/kd_objectives.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace vlkd {

/// Mean of the content-position rows; with include_cls the [CLS] row joins
/// the average. Throws on a sequence with no content.
Vector mean_content_state(const HiddenStates& h, bool include_cls = false);
Vector sentence_embedding(const EncoderModel& model, const TokenSequence& seq, bool include_cls = false);

struct RetrievalHit {
  std::string video_id;
  double score = 0.0;
};

struct RetrievalResult {
  std::string query_id;
  std::vector<RetrievalHit> topk;
  int gt_rank = 0;  // 1-based rank of the ground-truth video; 0 when none was given

  nlohmann::json to_json() const;
};

/// Exhaustive cosine ranking of `bank` rows against `query`. Ties are broken
/// by ascending video id.
RetrievalResult rank_videos(const Vector& query, const Matrix& bank, const std::vector<std::string>& ids, int k,
                            const std::string& query_id = {}, const std::string& gt_id = {});

RetrievalResult retrieve_videos(const EncoderModel& text_model, const TokenSequence& seq, const VokenBank& bank, int k,
                                const std::string& query_id = {}, const std::string& gt_id = {});

/// Every dataset video pooled through the video encoder, keyed by source id.
VokenBank pooled_video_bank(const EncoderModel& video_model, const std::vector<PairedSample>& data);

struct RetrievalSummary {
  std::vector<RetrievalResult> results;
  double recall_at_1 = 0.0;
  double recall_at_k = 0.0;
  int k = 0;
};

/// Text-to-video retrieval of every sample's sentence against all of the
/// dataset's videos.
RetrievalSummary evaluate_retrieval(const EncoderModel& text_model, const EncoderModel& video_model,
                                    const std::vector<PairedSample>& data, int k);

struct ProbeTask {
  std::string name = "dominant-cluster";
  int num_classes = 0;
  std::vector<TokenSequence> train;
  std::vector<int> train_labels;
  std::vector<TokenSequence> test;
  std::vector<int> test_labels;

  /// Checks class balance (within 10%), label range and at least two classes.
  void validate() const;
};

struct ProbeTaskOptions {
  int train_per_class = 8;
  int test_per_class = 40;
};

/// Fresh sentences labeled by their dominant grounding cluster, balanced per
/// class. Train and test sentences are disjoint as strings.
ProbeTask make_probe_task(const SyntheticDataset& data, std::uint64_t seed, const ProbeTaskOptions& opts = {});

struct ProbeOptions {
  int steps = 500;
  double lr = 0.1;
  bool include_cls = false;
};

/// Multinomial logistic regression from zero weights, full-batch gradient
/// descent. Returns test accuracy.
double linear_probe_accuracy(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& test_x,
                             const std::vector<int>& test_y, int num_classes, const ProbeOptions& opts = {});

double probe_eval(const EncoderModel& model, const ProbeTask& task, const ProbeOptions& opts = {});

struct Agreement {
  double mean_l2 = 0.0;
  double mean_cosine = 0.0;
  long positions = 0;
};

/// Student content states (after the distillation head when the model has one
/// and `use_head` is set) against the teacher's, averaged over every content
/// position of every text.
Agreement agreement_metrics(const EncoderModel& student, const EncoderModel& teacher,
                            const std::vector<TokenSequence>& texts, bool use_head = true);

}  // namespace vlkd
