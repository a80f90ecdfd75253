#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace mvcbm {

enum class Split : std::uint8_t { kTrain = 0, kTest = 1 };

std::string_view to_string(Split split);

// Samples with a variable number of views of equal width, binary concepts,
// and a binary label. Views are stored zero-padded to max_views().
class MultiviewDataset {
 public:
  MultiviewDataset() = default;
  MultiviewDataset(std::size_t max_views, std::size_t view_dim, std::size_t concept_count);

  // `views` holds view_count * view_dim values (no padding).
  void add_sample(std::span<const float> views, int view_count, std::span<const std::uint8_t> concepts,
                  std::uint8_t label, Split split);

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  std::size_t max_views() const { return max_views_; }
  std::size_t view_dim() const { return view_dim_; }
  std::size_t concept_count() const { return concept_count_; }

  int view_count(std::size_t i) const { return view_counts_[i]; }
  std::span<const float> view(std::size_t i, std::size_t v) const;
  // All max_views() slots of sample i, padding included.
  std::span<const float> padded_views(std::size_t i) const;
  std::span<const std::uint8_t> concepts(std::size_t i) const;
  std::uint8_t concept_value(std::size_t i, std::size_t k) const { return concepts_[i * concept_count_ + k]; }
  std::uint8_t label(std::size_t i) const { return labels_[i]; }
  Split split(std::size_t i) const { return splits_[i]; }

  std::vector<std::size_t> indices(Split split) const;
  std::size_t count(Split split) const;

  MultiviewDataset subset(std::span<const std::size_t> rows) const;
  MultiviewDataset only(Split split) const;
  // Keeps concept columns `cols` in the given order.
  MultiviewDataset select_concepts(std::span<const std::size_t> cols) const;
  // Keeps at most the first `views` views of every sample.
  MultiviewDataset truncate_views(std::size_t views) const;

  std::span<const float> raw_features() const { return features_; }
  std::span<const int> raw_view_counts() const { return view_counts_; }
  std::span<const std::uint8_t> raw_concepts() const { return concepts_; }
  std::span<const std::uint8_t> raw_labels() const { return labels_; }
  std::span<const Split> raw_splits() const { return splits_; }

  std::vector<double> label_vector() const;
  std::vector<double> concept_column(std::size_t k) const;

  bool operator==(const MultiviewDataset&) const = default;

 private:
  std::size_t max_views_ = 0;
  std::size_t view_dim_ = 0;
  std::size_t concept_count_ = 0;
  std::vector<float> features_;
  std::vector<int> view_counts_;
  std::vector<std::uint8_t> concepts_;
  std::vector<std::uint8_t> labels_;
  std::vector<Split> splits_;
};

}  // namespace mvcbm
