#pragma once

// Segmentation objective (dice + binary cross-entropy per task, deep
// supervision) and thresholded confusion metrics.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "crin/autograd.hpp"
#include "crin/model.hpp"

namespace crin {

/// Mean of max(z,0) - z·y + log(1 + exp(-|z|)) over all elements.
Var bce_with_logits(Var logits, const Tensor& target);
/// 1 - (2·Σ p·y + eps) / (Σ p + Σ y + eps), reduced over the whole batch.
Var dice_loss(Var prob, const Tensor& target, double eps = 1.0);
/// (dice(σ(z), y) + bce(z, y)) / 2.
Var task_loss(Var logits, const Tensor& target);
/// Σ over stages of BCE on both aux heads, logits resized to the target size.
/// Throws if the stage count differs from `expected_stages` or a stage lacks
/// aux logits.
Var aux_loss(Tape& tape, const std::vector<StageOutput>& stages, std::size_t expected_stages,
             const Tensor& y_building, const Tensor& y_road);

struct LossBreakdown {
  double l_building = 0;
  double l_road = 0;
  double l_aux = 0;
  double l_total = 0;
};

/// l_total = l_building + l_road + aux_weight · l_aux.
LossBreakdown combine_losses(double l_building, double l_road, double l_aux, double aux_weight = 0.1);

struct LossTerms {
  Var building, road, aux, total;
  LossBreakdown values() const;
};

/// Full objective for one forward pass. Variants without MTI stages have a
/// zero aux term.
LossTerms total_loss(Tape& tape, const Model& model, const ModelOutput& out, const Tensor& y_building,
                     const Tensor& y_road, double aux_weight = 0.1);

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  bool operator==(const ConfusionCounts&) const = default;
};

/// Binarizes prob >= threshold and accumulates against a {0,1} target.
void confusion_update(ConfusionCounts& counts, const Tensor& prob, const Tensor& target, double threshold = 0.5);

struct Metrics {
  double precision = 0, recall = 0, f1 = 0, iou = 0;
  /// Names of metrics whose ratio was 0/0 and set to 0.
  std::vector<std::string> undefined;
};

Metrics metrics_compute(const ConfusionCounts& counts);

/// Header "task,iou,precision,recall,f1", values in percent with 2 decimals.
std::string metrics_csv(const std::vector<std::pair<std::string, Metrics>>& rows);
/// Human-readable table with the same columns.
std::string metrics_table(const std::vector<std::pair<std::string, Metrics>>& rows);

}  // namespace crin
