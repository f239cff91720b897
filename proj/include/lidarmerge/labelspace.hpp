#pragma once

// Unified multi-dataset label space: union of per-dataset vocabularies with
// explicit synonym merging, per-dataset remap tables, thing/stuff flags, and
// the text-prompt registry that feeds the text encoder.

#include "lidarmerge/core.hpp"

#include <map>
#include <set>
#include <string_view>

namespace lidarmerge::labelspace {

struct DatasetClasses {
  std::string dataset_id;
  std::vector<std::string> classes;
  ClassId ignore_id = kDefaultIgnoreId;
  std::set<std::string> things;
};

/// A (dataset, class name) reference inside a synonym group.
struct ClassRef {
  std::string dataset_id;
  std::string class_name;
  friend auto operator<=>(const ClassRef&, const ClassRef&) = default;
};

struct SynonymGroup {
  std::string unified_name;
  std::vector<ClassRef> members;
};

class LabelSpace {
 public:
  static constexpr ClassId kUnifiedIgnore = kDefaultIgnoreId;

  std::size_t size() const noexcept { return unified_.size(); }
  const std::vector<std::string>& unified_names() const noexcept { return unified_; }
  const std::vector<bool>& thing_mask() const noexcept { return thing_mask_; }
  const std::vector<DatasetClasses>& datasets() const noexcept { return datasets_; }

  bool has_dataset(std::string_view id) const { return index_of(id).has_value(); }

  const DatasetClasses& dataset(std::string_view id) const { return datasets_[require(id)]; }

  /// remap[class-id] -> unified id.
  const std::vector<ClassId>& remap_table(std::string_view id) const { return remap_[require(id)]; }

  std::optional<ClassId> unified_id(std::string_view name) const {
    for (std::size_t i = 0; i < unified_.size(); ++i) {
      if (unified_[i] == name) return static_cast<ClassId>(i);
    }
    return std::nullopt;
  }

  /// Checks the structural invariants: remaps total and injective, every
  /// unified id reached by some dataset.
  void validate() const {
    std::vector<bool> hit(unified_.size(), false);
    for (std::size_t d = 0; d < datasets_.size(); ++d) {
      if (remap_[d].size() != datasets_[d].classes.size()) {
        throw Error(ErrorKind::schema, "labelspace", "remap of '" + datasets_[d].dataset_id + "' is not total");
      }
      std::set<ClassId> seen;
      for (ClassId u : remap_[d]) {
        if (u >= unified_.size() || !seen.insert(u).second) {
          throw Error(ErrorKind::schema, "labelspace", "remap of '" + datasets_[d].dataset_id + "' is not injective");
        }
        hit[u] = true;
      }
    }
    for (std::size_t u = 0; u < hit.size(); ++u) {
      if (!hit[u]) throw Error(ErrorKind::schema, "labelspace", "unified class '" + unified_[u] + "' is unreachable");
    }
  }

 private:
  friend LabelSpace build_unified_space(std::vector<DatasetClasses>, const std::vector<SynonymGroup>&);

  std::optional<std::size_t> index_of(std::string_view id) const {
    for (std::size_t d = 0; d < datasets_.size(); ++d) {
      if (datasets_[d].dataset_id == id) return d;
    }
    return std::nullopt;
  }
  std::size_t require(std::string_view id) const {
    auto d = index_of(id);
    if (!d) throw Error(ErrorKind::unknown_dataset, "labelspace", "unknown dataset '" + std::string(id) + "'");
    return *d;
  }

  std::vector<DatasetClasses> datasets_;
  std::vector<std::string> unified_;
  std::vector<std::vector<ClassId>> remap_;
  std::vector<bool> thing_mask_;
};

/// Builds the union space. Classes in one synonym group share a unified id;
/// everything else gets a fresh id. Unified ids are assigned in first-
/// appearance order walking datasets, then classes, in input order. A
/// unified class is a thing class if any of its members is.
inline LabelSpace build_unified_space(std::vector<DatasetClasses> datasets, const std::vector<SynonymGroup>& synonyms) {
  std::set<std::string> dataset_ids;
  for (const auto& d : datasets) {
    if (!dataset_ids.insert(d.dataset_id).second) {
      throw Error(ErrorKind::schema, "labelspace", "dataset '" + d.dataset_id + "' listed twice");
    }
    std::set<std::string> names;
    for (const auto& c : d.classes) {
      if (!names.insert(c).second) {
        throw Error(ErrorKind::schema, "labelspace", "class '" + c + "' repeated in dataset '" + d.dataset_id + "'");
      }
    }
    if (d.ignore_id < d.classes.size()) {
      throw Error(ErrorKind::schema, "labelspace", "ignore id of '" + d.dataset_id + "' collides with a class id");
    }
    for (const auto& t : d.things) {
      if (!names.count(t)) {
        throw Error(ErrorKind::schema, "labelspace", "thing class '" + t + "' not in dataset '" + d.dataset_id + "'");
      }
    }
  }

  std::map<ClassRef, std::size_t> group_of;
  for (std::size_t g = 0; g < synonyms.size(); ++g) {
    std::set<std::string> datasets_in_group;
    for (const auto& ref : synonyms[g].members) {
      auto it = std::find_if(datasets.begin(), datasets.end(),
                             [&](const DatasetClasses& d) { return d.dataset_id == ref.dataset_id; });
      if (it == datasets.end()) {
        throw Error(ErrorKind::unknown_dataset, "labelspace",
                    "synonym group '" + synonyms[g].unified_name + "' references unknown dataset '" + ref.dataset_id + "'");
      }
      if (std::find(it->classes.begin(), it->classes.end(), ref.class_name) == it->classes.end()) {
        throw Error(ErrorKind::unknown_class, "labelspace",
                    "synonym group '" + synonyms[g].unified_name + "' references unknown class '" + ref.dataset_id +
                        ":" + ref.class_name + "'");
      }
      if (!datasets_in_group.insert(ref.dataset_id).second) {
        throw Error(ErrorKind::conflicting_synonym, "labelspace",
                    "synonym group '" + synonyms[g].unified_name + "' merges two classes of dataset '" +
                        ref.dataset_id + "'");
      }
      auto [pos, inserted] = group_of.emplace(ref, g);
      if (!inserted && pos->second != g) {
        throw Error(ErrorKind::conflicting_synonym, "labelspace",
                    "class '" + ref.dataset_id + ":" + ref.class_name + "' is in groups '" +
                        synonyms[pos->second].unified_name + "' and '" + synonyms[g].unified_name + "'");
      }
    }
  }

  LabelSpace space;
  std::vector<std::optional<ClassId>> group_id(synonyms.size());
  std::set<std::string> used_names;
  auto fresh_name = [&](const std::string& preferred, const std::string& dataset) {
    std::string name = used_names.count(preferred) ? dataset + ":" + preferred : preferred;
    used_names.insert(name);
    return name;
  };

  for (const auto& d : datasets) {
    std::vector<ClassId> table;
    table.reserve(d.classes.size());
    for (const auto& c : d.classes) {
      auto g = group_of.find(ClassRef{d.dataset_id, c});
      ClassId u = 0;
      if (g != group_of.end()) {
        auto& gid = group_id[g->second];
        if (!gid) {
          gid = static_cast<ClassId>(space.unified_.size());
          space.unified_.push_back(fresh_name(synonyms[g->second].unified_name, d.dataset_id));
          space.thing_mask_.push_back(false);
        }
        u = *gid;
      } else {
        u = static_cast<ClassId>(space.unified_.size());
        space.unified_.push_back(fresh_name(c, d.dataset_id));
        space.thing_mask_.push_back(false);
      }
      if (d.things.count(c)) space.thing_mask_[u] = true;
      table.push_back(u);
    }
    space.remap_.push_back(std::move(table));
  }
  space.datasets_ = std::move(datasets);
  if (space.unified_.size() >= LabelSpace::kUnifiedIgnore) {
    throw Error(ErrorKind::schema, "labelspace", "unified space collides with the ignore id");
  }
  space.validate();
  return space;
}

/// Per-point dataset class ids to unified ids. The dataset's ignore id maps
/// to LabelSpace::kUnifiedIgnore.
inline std::vector<ClassId> remap_labels(std::span<const ClassId> labels, const LabelSpace& space,
                                         std::string_view dataset_id) {
  const auto& d = space.dataset(dataset_id);
  const auto& table = space.remap_table(dataset_id);
  std::vector<ClassId> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const ClassId l = labels[i];
    if (l == d.ignore_id) {
      out[i] = LabelSpace::kUnifiedIgnore;
    } else if (l < table.size()) {
      out[i] = table[l];
    } else {
      throw Error(ErrorKind::invalid_label, "labelspace",
                  "label " + std::to_string(l) + " at index " + std::to_string(i) + " outside dataset '" +
                      std::string(dataset_id) + "'");
    }
  }
  return out;
}

/// True exactly for unified classes the dataset's remap reaches. Negatives
/// in the contrastive losses are restricted to this set.
inline std::vector<bool> dataset_negative_mask(const LabelSpace& space, std::string_view dataset_id) {
  std::vector<bool> mask(space.size(), false);
  for (ClassId u : space.remap_table(dataset_id)) mask[u] = true;
  return mask;
}

/// Prompt strings per dataset class, one table per source dataset.
using DatasetPromptTable = std::map<std::string, std::vector<std::string>>;

class PromptRegistry {
 public:
  PromptRegistry() = default;
  PromptRegistry(std::vector<std::vector<std::string>> prompts, std::vector<std::string> templates,
                 std::map<std::string, DatasetPromptTable> per_dataset)
      : prompts_(std::move(prompts)), templates_(std::move(templates)), per_dataset_(std::move(per_dataset)) {
    for (std::size_t u = 0; u < prompts_.size(); ++u) {
      if (prompts_[u].empty()) {
        throw Error(ErrorKind::schema, "labelspace", "unified class " + std::to_string(u) + " has no prompt");
      }
    }
  }

  std::size_t size() const noexcept { return prompts_.size(); }
  const std::vector<std::string>& templates() const noexcept { return templates_; }

  const std::vector<std::string>& prompts(ClassId unified_id) const {
    if (unified_id >= prompts_.size()) {
      throw Error(ErrorKind::unknown_class, "labelspace", "unknown unified class " + std::to_string(unified_id));
    }
    return prompts_[unified_id];
  }

  /// The source table row for one dataset class, verbatim.
  const std::vector<std::string>& dataset_prompts(std::string_view dataset_id, std::string_view class_name) const {
    auto d = per_dataset_.find(std::string(dataset_id));
    if (d == per_dataset_.end()) {
      throw Error(ErrorKind::unknown_dataset, "labelspace", "no prompts for dataset '" + std::string(dataset_id) + "'");
    }
    auto c = d->second.find(std::string(class_name));
    if (c == d->second.end()) {
      throw Error(ErrorKind::unknown_class, "labelspace",
                  "no prompts for '" + std::string(dataset_id) + ":" + std::string(class_name) + "'");
    }
    return c->second;
  }

  /// Every template applied to every prompt of the class ("{}" is replaced).
  std::vector<std::string> expanded(ClassId unified_id) const {
    std::vector<std::string> out;
    for (const auto& p : prompts(unified_id)) {
      if (templates_.empty()) {
        out.push_back(p);
        continue;
      }
      for (const auto& t : templates_) {
        std::string s = t;
        if (auto pos = s.find("{}"); pos != std::string::npos) s.replace(pos, 2, p);
        out.push_back(std::move(s));
      }
    }
    return out;
  }

 private:
  std::vector<std::vector<std::string>> prompts_;
  std::vector<std::string> templates_;
  std::map<std::string, DatasetPromptTable> per_dataset_;
};

/// Unified prompts are the de-duplicated union of the member classes'
/// prompts, in dataset order. A class without a table row falls back to its
/// own name.
inline PromptRegistry build_prompt_registry(const LabelSpace& space,
                                            const std::map<std::string, DatasetPromptTable>& per_dataset,
                                            std::vector<std::string> templates) {
  std::vector<std::vector<std::string>> prompts(space.size());
  for (const auto& d : space.datasets()) {
    const auto& table = space.remap_table(d.dataset_id);
    const auto rows = per_dataset.find(d.dataset_id);
    for (std::size_t c = 0; c < d.classes.size(); ++c) {
      auto& dst = prompts[table[c]];
      auto add = [&](const std::string& p) {
        if (std::find(dst.begin(), dst.end(), p) == dst.end()) dst.push_back(p);
      };
      bool found = false;
      if (rows != per_dataset.end()) {
        if (auto r = rows->second.find(d.classes[c]); r != rows->second.end()) {
          for (const auto& p : r->second) add(p);
          found = !r->second.empty();
        }
      }
      if (!found) add(d.classes[c]);
    }
  }
  for (const auto& [id, rows] : per_dataset) {
    if (!space.has_dataset(id)) {
      throw Error(ErrorKind::unknown_dataset, "labelspace", "prompt table for unknown dataset '" + id + "'");
    }
    const auto& classes = space.dataset(id).classes;
    for (const auto& [name, _] : rows) {
      if (std::find(classes.begin(), classes.end(), name) == classes.end()) {
        throw Error(ErrorKind::unknown_class, "labelspace", "prompt row for unknown class '" + id + ":" + name + "'");
      }
    }
  }
  return PromptRegistry(std::move(prompts), std::move(templates), per_dataset);
}

inline const std::vector<std::string>& prompts_for_class(const PromptRegistry& reg, ClassId unified_id) {
  return reg.prompts(unified_id);
}

}  // namespace lidarmerge::labelspace
