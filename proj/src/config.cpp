#include "sala/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "sala/errors.hpp"

namespace sala {

namespace {

using Path = std::filesystem::path;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

// A bad value; the caller adds the key and line.
struct ValueError {
  std::string what;
};

template <class Int>
Int parse_int(std::string_view v) {
  Int out{};
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || end != v.data() + v.size()) {
    throw ValueError{"expects a non-negative integer, got '" + std::string(v) + "'"};
  }
  return out;
}

double parse_real(std::string_view v) {
  double out = 0.0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || end != v.data() + v.size() || !std::isfinite(out)) {
    throw ValueError{"expects a real number, got '" + std::string(v) + "'"};
  }
  return out;
}

bool parse_bool(std::string_view v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ValueError{"expects true or false, got '" + std::string(v) + "'"};
}

std::string parse_string(std::string_view v) {
  if (v.size() < 2 || v.front() != '"' || v.back() != '"') return std::string(v);
  std::string out;
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    if (v[i] == '\\' && i + 2 < v.size()) ++i;
    else if (v[i] == '"') throw ValueError{"has an unescaped quote in " + std::string(v)};
    out += v[i];
  }
  return out;
}

// Splits "[a, "b,c", d]" on top-level commas.
std::vector<std::string_view> split_list(std::string_view v) {
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') {
    throw ValueError{"expects a list like [a, b], got '" + std::string(v) + "'"};
  }
  v = trim(v.substr(1, v.size() - 2));
  std::vector<std::string_view> items;
  if (v.empty()) return items;
  bool quoted = false;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= v.size(); ++i) {
    if (i < v.size() && v[i] == '\\' && quoted) {
      ++i;
      continue;
    }
    if (i < v.size() && v[i] == '"') quoted = !quoted;
    if (i == v.size() || (v[i] == ',' && !quoted)) {
      const auto item = trim(v.substr(start, i - start));
      if (item.empty()) throw ValueError{"has an empty list item"};
      items.push_back(item);
      start = i + 1;
    }
  }
  if (quoted) throw ValueError{"has an unterminated string"};
  return items;
}

std::string emit_real(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, end);
  // Keep reals recognizable as such.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string emit_string(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

template <class T, class F>
std::string emit_list(const std::vector<T>& items, F emit_one) {
  std::string out = "[";
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? ", " : "") + emit_one(items[i]);
  return out + "]";
}

std::string_view select_name(NeighborSelect s) { return s == NeighborSelect::Nearest ? "nearest" : "random"; }

NeighborSelect parse_select(std::string_view v) {
  if (v == "nearest") return NeighborSelect::Nearest;
  if (v == "random") return NeighborSelect::Random;
  throw ValueError{"expects nearest or random, got '" + std::string(v) + "'"};
}

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> emit;
  std::function<void(ExperimentConfig&, std::string_view)> parse;
};

template <class Get>
Field size_field(std::string key, Get get) {
  return {std::move(key), [get](const ExperimentConfig& c) { return std::to_string(get(const_cast<ExperimentConfig&>(c))); },
          [get](ExperimentConfig& c, std::string_view v) { get(c) = parse_int<std::size_t>(v); }};
}

template <class Get>
Field u64_field(std::string key, Get get) {
  return {std::move(key), [get](const ExperimentConfig& c) { return std::to_string(get(const_cast<ExperimentConfig&>(c))); },
          [get](ExperimentConfig& c, std::string_view v) { get(c) = parse_int<std::uint64_t>(v); }};
}

template <class Get>
Field real_field(std::string key, Get get) {
  return {std::move(key), [get](const ExperimentConfig& c) { return emit_real(get(const_cast<ExperimentConfig&>(c))); },
          [get](ExperimentConfig& c, std::string_view v) { get(c) = parse_real(v); }};
}

template <class Get>
Field bool_field(std::string key, Get get) {
  return {std::move(key),
          [get](const ExperimentConfig& c) { return std::string(get(const_cast<ExperimentConfig&>(c)) ? "true" : "false"); },
          [get](ExperimentConfig& c, std::string_view v) { get(c) = parse_bool(v); }};
}

template <class Get>
Field path_field(std::string key, Get get) {
  return {std::move(key),
          [get](const ExperimentConfig& c) { return emit_string(get(const_cast<ExperimentConfig&>(c)).string()); },
          [get](ExperimentConfig& c, std::string_view v) { get(c) = Path(parse_string(v)); }};
}

template <class Get>
Field path_list_field(std::string key, Get get) {
  return {std::move(key),
          [get](const ExperimentConfig& c) {
            return emit_list(get(const_cast<ExperimentConfig&>(c)), [](const Path& p) { return emit_string(p.string()); });
          },
          [get](ExperimentConfig& c, std::string_view v) {
            auto& out = get(c);
            out.clear();
            for (auto item : split_list(v)) out.emplace_back(parse_string(item));
          }};
}

template <class Get>
Field size_list_field(std::string key, Get get) {
  return {std::move(key),
          [get](const ExperimentConfig& c) {
            return emit_list(get(const_cast<ExperimentConfig&>(c)), [](std::size_t n) { return std::to_string(n); });
          },
          [get](ExperimentConfig& c, std::string_view v) {
            auto& out = get(c);
            out.clear();
            for (auto item : split_list(v)) out.push_back(parse_int<std::size_t>(item));
          }};
}

// Converts library ConfigErrors from name parsers into value errors.
template <class F>
auto named(F parse, std::string_view v) {
  try {
    return parse(v);
  } catch (const ConfigError& e) {
    throw ValueError{e.what()};
  }
}

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(u64_field("run.seed", [](C& c) -> auto& { return c.seed; }));
    f.push_back(path_field("run.output_dir", [](C& c) -> auto& { return c.output_dir; }));
    f.push_back(size_field("run.workers", [](C& c) -> auto& { return c.workers; }));

    f.push_back(size_field("network.width", [](C& c) -> auto& { return c.network.width; }));
    f.push_back(size_field("network.stages", [](C& c) -> auto& { return c.network.stages; }));
    f.push_back(size_list_field("network.blocks_per_stage", [](C& c) -> auto& { return c.network.blocks_per_stage; }));
    f.push_back(size_field("network.num_classes", [](C& c) -> auto& { return c.network.num_classes; }));
    f.push_back(size_field("network.num_heads", [](C& c) -> auto& { return c.network.num_heads; }));
    f.push_back(size_field("network.bottleneck", [](C& c) -> auto& { return c.network.bottleneck; }));
    f.push_back(real_field("network.leaky_slope", [](C& c) -> auto& { return c.network.leaky_slope; }));
    f.push_back(bool_field("network.batch_norm", [](C& c) -> auto& { return c.network.batch_norm; }));

    f.push_back({"aggregator.family",
                 [](const C& c) { return std::string(family_name(c.aggregator.family)); },
                 [](C& c, std::string_view v) { c.aggregator.family = named(parse_family, v); }});
    f.push_back(size_field("aggregator.groups", [](C& c) -> auto& { return c.aggregator.groups; }));
    f.push_back(size_field("aggregator.pos_hidden", [](C& c) -> auto& { return c.aggregator.pos_hidden; }));
    f.push_back(real_field("aggregator.sigma", [](C& c) -> auto& { return c.aggregator.sigma; }));

    f.push_back(real_field("geometry.base_grid", [](C& c) -> auto& { return c.geometry.base_grid; }));
    f.push_back(real_field("geometry.base_radius", [](C& c) -> auto& { return c.geometry.base_radius; }));
    f.push_back(size_field("geometry.k_max", [](C& c) -> auto& { return c.geometry.k_max; }));
    f.push_back({"geometry.neighbor_select", [](const C& c) { return std::string(select_name(c.geometry.select)); },
                 [](C& c, std::string_view v) { c.geometry.select = parse_select(v); }});

    f.push_back(real_field("training.lr", [](C& c) -> auto& { return c.training.lr; }));
    f.push_back(real_field("training.momentum", [](C& c) -> auto& { return c.training.momentum; }));
    f.push_back(real_field("training.weight_decay", [](C& c) -> auto& { return c.training.weight_decay; }));
    f.push_back(size_field("training.epochs", [](C& c) -> auto& { return c.training.epochs; }));
    f.push_back(size_field("training.steps_per_epoch", [](C& c) -> auto& { return c.training.steps_per_epoch; }));
    f.push_back(size_field("training.batch_size", [](C& c) -> auto& { return c.training.batch_size; }));
    f.push_back(real_field("training.sphere_radius", [](C& c) -> auto& { return c.training.sphere_radius; }));
    f.push_back(size_field("training.min_sphere_points", [](C& c) -> auto& { return c.training.min_sphere_points; }));
    f.push_back({"training.recipe", [](const C& c) { return std::string(recipe_name(c.training.recipe)); },
                 [](C& c, std::string_view v) { c.training.recipe = named(parse_recipe, v); }});
    f.push_back(real_field("training.val_radius", [](C& c) -> auto& { return c.training.val_radius; }));
    f.push_back(real_field("training.val_stride", [](C& c) -> auto& { return c.training.val_stride; }));

    f.push_back(bool_field("augment.rot_z", [](C& c) -> auto& { return c.training.aug.rot_z; }));
    f.push_back({"augment.scale_range",
                 [](const C& c) {
                   return "[" + emit_real(c.training.aug.scale_lo) + ", " + emit_real(c.training.aug.scale_hi) + "]";
                 },
                 [](C& c, std::string_view v) {
                   const auto items = split_list(v);
                   if (items.size() != 2) throw ValueError{"expects [lo, hi], got '" + std::string(v) + "'"};
                   c.training.aug.scale_lo = parse_real(items[0]);
                   c.training.aug.scale_hi = parse_real(items[1]);
                 }});
    f.push_back(real_field("augment.jitter_sigma", [](C& c) -> auto& { return c.training.aug.jitter_sigma; }));
    f.push_back(real_field("augment.color_drop_p", [](C& c) -> auto& { return c.training.aug.color_drop_p; }));

    f.push_back(real_field("eval.radius", [](C& c) -> auto& { return c.eval.radius; }));
    f.push_back(real_field("eval.stride", [](C& c) -> auto& { return c.eval.stride; }));
    f.push_back(path_field("eval.checkpoint", [](C& c) -> auto& { return c.checkpoint; }));

    f.push_back({"data.source", [](const C& c) { return c.data.source; },
                 [](C& c, std::string_view v) {
                   std::string s = parse_string(v);
                   if (s != "synthetic" && s != "files") {
                     throw ValueError{"expects synthetic or files, got '" + s + "'"};
                   }
                   c.data.source = s;
                 }});
    f.push_back(path_list_field("data.train", [](C& c) -> auto& { return c.data.train; }));
    f.push_back(path_list_field("data.val", [](C& c) -> auto& { return c.data.val; }));
    f.push_back(size_list_field("data.train_categories", [](C& c) -> auto& { return c.data.train_categories; }));
    f.push_back(size_list_field("data.val_categories", [](C& c) -> auto& { return c.data.val_categories; }));
    f.push_back(size_field("data.val_rooms", [](C& c) -> auto& { return c.data.val_rooms; }));

    f.push_back(size_field("synthetic.num_rooms", [](C& c) -> auto& { return c.data.synthetic.num_rooms; }));
    f.push_back(real_field("synthetic.room_size", [](C& c) -> auto& { return c.data.synthetic.room_size; }));
    f.push_back(real_field("synthetic.wall_height", [](C& c) -> auto& { return c.data.synthetic.wall_height; }));
    f.push_back(size_field("synthetic.classes", [](C& c) -> auto& { return c.data.synthetic.classes; }));
    f.push_back(real_field("synthetic.density", [](C& c) -> auto& { return c.data.synthetic.density; }));
    f.push_back(size_field("synthetic.boxes", [](C& c) -> auto& { return c.data.synthetic.boxes; }));
    f.push_back(size_field("synthetic.spheres", [](C& c) -> auto& { return c.data.synthetic.spheres; }));
    f.push_back(real_field("synthetic.noise_sigma", [](C& c) -> auto& { return c.data.synthetic.noise_sigma; }));
    f.push_back(real_field("synthetic.object_color_sigma",
                           [](C& c) -> auto& { return c.data.synthetic.object_color_sigma; }));
    f.push_back(real_field("synthetic.point_color_sigma",
                           [](C& c) -> auto& { return c.data.synthetic.point_color_sigma; }));
    f.push_back(u64_field("synthetic.seed", [](C& c) -> auto& { return c.data.synthetic.seed; }));

    f.push_back(path_field("profile.cloud", [](C& c) -> auto& { return c.profile.cloud; }));
    f.push_back(size_field("profile.points", [](C& c) -> auto& { return c.profile.points; }));

    f.push_back(size_field("gradcheck.seeds", [](C& c) -> auto& { return c.gradcheck.seeds; }));
    f.push_back(real_field("gradcheck.eps", [](C& c) -> auto& { return c.gradcheck.eps; }));
    f.push_back(real_field("gradcheck.tolerance", [](C& c) -> auto& { return c.gradcheck.tolerance; }));
    return f;
  }();
  return table;
}

}  // namespace

void derive_settings(ExperimentConfig& c) {
  c.network.in_features = recipe_dims(c.training.recipe);
  c.training.seed = c.seed;
  c.training.workers = c.workers ? c.workers : std::max<std::size_t>(1, std::thread::hardware_concurrency());
  c.geometry.select_seed = c.seed;
}

void ExperimentConfig::validate() const {
  network.validate();
  AggregatorConfig agg = aggregator;
  agg.c_in = agg.c_out = network.width;
  agg.validate();
  training.validate();
  if (training.aug.scale_lo > training.aug.scale_hi) throw ConfigError("augment.scale_range needs lo <= hi");
  if (!(geometry.base_grid > 0.0) || !(geometry.base_radius > 0.0) || geometry.k_max == 0) {
    throw ConfigError("geometry.base_grid, base_radius and k_max must be positive");
  }
  if (data.source == "synthetic") {
    data.synthetic.validate();
    if (data.synthetic.classes > network.num_classes) {
      throw ConfigError("synthetic.classes exceeds network.num_classes");
    }
    if (data.val_rooms >= data.synthetic.num_rooms) {
      throw ConfigError("data.val_rooms must leave at least one training room");
    }
  } else if (data.train.empty()) {
    throw ConfigError("data.source = files needs data.train");
  }
  if (!data.train_categories.empty() && data.train_categories.size() != data.train.size()) {
    throw ConfigError("data.train_categories needs one entry per data.train file");
  }
  if (!data.val_categories.empty() && data.val_categories.size() != data.val.size()) {
    throw ConfigError("data.val_categories needs one entry per data.val file");
  }
  for (const auto* cats : {&data.train_categories, &data.val_categories})
    for (auto c : *cats)
      if (c >= network.num_heads) throw ConfigError("data category " + std::to_string(c) + " has no network head");
  if (gradcheck.seeds == 0 || !(gradcheck.eps > 0.0) || !(gradcheck.tolerance > 0.0)) {
    throw ConfigError("gradcheck.seeds, eps and tolerance must be positive");
  }
  if (output_dir.empty()) throw ConfigError("run.output_dir must not be empty");
}

ExperimentConfig parse_config_text(std::string_view text, std::string_view origin) {
  std::map<std::string, const Field*, std::less<>> index;
  for (const auto& f : fields()) index.emplace(f.key, &f);
  ExperimentConfig cfg;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  auto where = [&](std::size_t n) { return std::string(origin) + ":" + std::to_string(n) + ": "; };
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where(line_no) + "expected 'section.key = value'");
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto it = index.find(key);
    if (it == index.end()) throw ConfigError(where(line_no) + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where(line_no) + "duplicate key '" + key + "'");
    if (value.empty()) throw ConfigError(where(line_no) + key + " has no value");
    try {
      it->second->parse(cfg, value);
    } catch (const ValueError& e) {
      throw ConfigError(where(line_no) + key + " " + e.what);
    }
  }
  if (!seen.contains("run.seed")) throw ConfigError(where(line_no) + "missing required key run.seed");
  derive_settings(cfg);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(origin) + ": " + e.what());
  }
  return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  ExperimentConfig cfg = parse_config_text(text.str(), path.string());
  for (const auto* list : {&cfg.data.train, &cfg.data.val})
    for (const auto& p : *list)
      if (!std::filesystem::exists(p)) throw ConfigError(path.string() + ": data file " + p.string() + " not found");
  if (!cfg.profile.cloud.empty() && !std::filesystem::exists(cfg.profile.cloud)) {
    throw ConfigError(path.string() + ": profile.cloud " + cfg.profile.cloud.string() + " not found");
  }
  return cfg;
}

std::string emit_config(const ExperimentConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const std::string s = f.key.substr(0, f.key.find('.'));
    if (s != section) {
      if (!section.empty()) out += "\n";
      section = s;
    }
    out += f.key + " = " + f.emit(cfg) + "\n";
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace sala
