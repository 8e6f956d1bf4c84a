#include "floorgen/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace floorgen::data {

namespace {

struct TypeInfo {
  BuildingType type;
  const char* name;
  const char* prompt;
  int rooms_min;
  int rooms_max;
  std::vector<std::string> roles;  // largest room first
};

const std::vector<TypeInfo>& type_table() {
  static const std::vector<TypeInfo> t{
      {BuildingType::studio, "studio", "a floorplan for a studio apartment", 1, 2, {"living", "bath"}},
      {BuildingType::one_bedroom_apartment, "one_bedroom_apartment", "a floorplan for a one bedroom apartment", 3, 4,
       {"living", "bedroom", "kitchen", "bath"}},
      {BuildingType::two_bedroom_apartment, "two_bedroom_apartment", "a floorplan for a two bedroom apartment", 4, 6,
       {"living", "bedroom", "bedroom", "kitchen", "bath", "corridor"}},
      {BuildingType::office_one_core, "office_one_core", "a floorplan for an office with one core", 3, 8,
       {"open_office", "meeting", "core", "office", "office", "meeting", "office", "office"}},
      {BuildingType::library, "library", "a floorplan for a library", 3, 6,
       {"stacks", "reading", "stacks", "service", "reading", "office"}},
      {BuildingType::auditorium, "auditorium", "a floorplan for an auditorium", 2, 4, {"hall", "stage", "foyer", "service"}},
      {BuildingType::football_stadium, "football_stadium", "a floor plan for a football stadium", 2, 3, {}},
      {BuildingType::arena, "arena", "a floorplan for an arena", 2, 3, {}},
  };
  return t;
}

const TypeInfo& info(BuildingType t) {
  for (const auto& i : type_table())
    if (i.type == t) return i;
  throw ValidationError("unknown building type");
}

constexpr double kMinRoomSide = 0.1;

struct Rect {
  double x0, y0, x1, y1;
  double w() const { return x1 - x0; }
  double h() const { return y1 - y0; }
  double area() const { return w() * h(); }
  bool contains(double x, double y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
};

struct Footprint {
  FootprintShape shape = FootprintShape::rectangle;
  Rect box{};
  Rect cut{};         // l_shape: removed corner
  double radius = 0;  // rounded_rect
  /// Axis-aligned pieces that tile the footprint's bounding region.
  std::vector<Rect> parts;

  bool contains(double x, double y) const {
    if (!box.contains(x, y)) return false;
    switch (shape) {
      case FootprintShape::rectangle:
        return true;
      case FootprintShape::l_shape:
        return !cut.contains(x, y);
      case FootprintShape::ellipse: {
        const double a = box.w() / 2, b = box.h() / 2;
        const double dx = (x - box.x0 - a) / a, dy = (y - box.y0 - b) / b;
        return dx * dx + dy * dy <= 1.0;
      }
      case FootprintShape::rounded_rect: {
        const double cx = std::clamp(x, box.x0 + radius, box.x1 - radius);
        const double cy = std::clamp(y, box.y0 + radius, box.y1 - radius);
        return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius;
      }
    }
    return false;
  }
};

Footprint make_footprint(FootprintShape shape, Rng& rng) {
  Footprint f;
  f.shape = shape;
  double w, h;
  if (shape == FootprintShape::ellipse) {
    w = 2 * rng.uniform(0.4, 0.47);
    h = 2 * rng.uniform(0.36, 0.44);
  } else if (shape == FootprintShape::l_shape) {
    w = rng.uniform(0.72, 0.9);
    h = rng.uniform(0.72, 0.9);
  } else {
    w = rng.uniform(0.62, 0.9);
    h = rng.uniform(0.55, 0.9);
  }
  const double x0 = 0.5 - w / 2 + rng.uniform(-1.0, 1.0) * std::min(0.03, (0.96 - w) / 2);
  const double y0 = 0.5 - h / 2 + rng.uniform(-1.0, 1.0) * std::min(0.03, (0.96 - h) / 2);
  f.box = {x0, y0, x0 + w, y0 + h};
  f.parts = {f.box};
  if (shape == FootprintShape::l_shape) {
    const double cw = w * rng.uniform(0.3, 0.45), ch = h * rng.uniform(0.3, 0.45);
    const int corner = static_cast<int>(rng.uniform_int(0, 3));
    const bool right = corner & 1, bottom = corner & 2;
    const double cx = right ? f.box.x1 - cw : f.box.x0;
    const double cy = bottom ? f.box.y1 - ch : f.box.y0;
    f.cut = {cx, cy, cx + cw, cy + ch};
    // Full-height wing beside the cut, plus the shortened wing under/over it.
    const double split_x = right ? f.box.x1 - cw : f.box.x0 + cw;
    const Rect wing = right ? Rect{f.box.x0, f.box.y0, split_x, f.box.y1} : Rect{split_x, f.box.y0, f.box.x1, f.box.y1};
    const Rect stub = right ? Rect{split_x, bottom ? f.box.y0 : f.cut.y1, f.box.x1, bottom ? f.cut.y0 : f.box.y1}
                            : Rect{f.box.x0, bottom ? f.box.y0 : f.cut.y1, split_x, bottom ? f.cut.y0 : f.box.y1};
    f.parts = {wing, stub};
  } else if (shape == FootprintShape::rounded_rect) {
    f.radius = std::min(w, h) * rng.uniform(0.12, 0.25);
  }
  return f;
}

/// Region id per pixel (-1 outside) plus a role per region.
struct Layout {
  int size = 0;
  std::vector<int> region;
  std::vector<std::string> roles;
  /// Extra line work painted after walls (pitch markings).
  std::vector<std::pair<int, std::array<double, 3>>> overlay;
};

double centre(int i, int size) { return (i + 0.5) / size; }

std::vector<Rect> partition(std::vector<Rect> leaves, int target, Rng& rng) {
  while (static_cast<int>(leaves.size()) < target) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < leaves.size(); ++i)
      if (leaves[i].area() > leaves[best].area()) best = i;
    const Rect r = leaves[best];
    const bool vertical = r.w() >= r.h();
    const double side = vertical ? r.w() : r.h();
    if (side * 0.35 < kMinRoomSide)
      throw GenerationError("room range too large for footprint: cannot place " + std::to_string(target) + " rooms");
    const double f = rng.uniform(0.35, 0.65);
    Rect a = r, b = r;
    if (vertical) {
      a.x1 = b.x0 = r.x0 + f * r.w();
    } else {
      a.y1 = b.y0 = r.y0 + f * r.h();
    }
    leaves[best] = a;
    leaves.insert(leaves.begin() + static_cast<std::ptrdiff_t>(best) + 1, b);
  }
  return leaves;
}

Layout bsp_layout(const BuildingSpec& spec, const Footprint& fp, Rng& rng, int size) {
  const TypeInfo& ti = info(spec.building_type);
  const int target = static_cast<int>(rng.uniform_int(spec.rooms_min, spec.rooms_max));
  const std::vector<Rect> leaves = partition(fp.parts, target, rng);
  // A single room spanning several footprint parts.
  const bool merged = target < static_cast<int>(leaves.size());
  const std::size_t rooms = merged ? 1 : leaves.size();

  std::vector<std::size_t> by_area(rooms);
  std::iota(by_area.begin(), by_area.end(), 0);
  std::stable_sort(by_area.begin(), by_area.end(), [&](auto a, auto b) { return leaves[a].area() > leaves[b].area(); });
  Layout l;
  l.size = size;
  l.roles.resize(rooms);
  for (std::size_t rank = 0; rank < by_area.size(); ++rank) l.roles[by_area[rank]] = ti.roles[rank % ti.roles.size()];

  l.region.assign(static_cast<std::size_t>(size) * size, -1);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double u = centre(x, size), v = centre(y, size);
      if (!fp.contains(u, v)) continue;
      int id = 0;
      double best = 1e9;
      for (std::size_t i = 0; i < leaves.size(); ++i) {
        const Rect& r = leaves[i];
        if (r.contains(u, v)) {
          id = static_cast<int>(i);
          break;
        }
        const double dx = std::max({r.x0 - u, 0.0, u - r.x1}), dy = std::max({r.y0 - v, 0.0, v - r.y1});
        if (dx * dx + dy * dy < best) {
          best = dx * dx + dy * dy;
          id = static_cast<int>(i);
        }
      }
      l.region[static_cast<std::size_t>(y) * size + x] = merged ? 0 : id;
    }
  return l;
}

Layout bowl_layout(const BuildingSpec& spec, const Footprint& fp, Rng& rng, int size) {
  const bool stadium = spec.building_type == BuildingType::football_stadium;
  const int bands = static_cast<int>(rng.uniform_int(spec.rooms_min, spec.rooms_max));
  const double r_in = stadium ? rng.uniform(0.5, 0.55) : rng.uniform(0.42, 0.48);
  const double a = fp.box.w() / 2, b = fp.box.h() / 2;
  const double cx = fp.box.x0 + a, cy = fp.box.y0 + b;
  if (bands < 1 || (1.0 - r_in) / bands * std::min(a, b) < 3.0 / 64)
    throw GenerationError("room range too large for footprint: " + std::to_string(bands) + " seating bands do not fit");
  const double px = stadium ? 0.72 * r_in : 0.5 * r_in;  // field half extents in normalized radius
  const double py = stadium ? 0.5 * r_in : 0.36 * r_in;

  Layout l;
  l.size = size;
  l.roles = {stadium ? "pitch" : "court", "apron"};
  for (int k = 0; k < bands; ++k) l.roles.push_back(k % 2 == 0 ? "seating" : "seating_alt");
  l.region.assign(static_cast<std::size_t>(size) * size, -1);
  const std::array<double, 3> marking = Palette::rooms().at("marking");
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double u = centre(x, size), v = centre(y, size);
      if (!fp.contains(u, v)) continue;
      const double dx = (u - cx) / a, dy = (v - cy) / b;
      const double r = std::sqrt(dx * dx + dy * dy);
      int id;
      if (std::abs(dx) <= px && std::abs(dy) <= py) {
        id = 0;
      } else if (r < r_in) {
        id = 1;
      } else {
        id = 2 + std::min(bands - 1, static_cast<int>((r - r_in) / (1.0 - r_in) * bands));
      }
      const std::size_t idx = static_cast<std::size_t>(y) * size + x;
      l.region[idx] = id;
      if (id == 0) {
        // halfway line and centre circle, one pixel wide
        const double pix = 1.0 / size;
        const double rc = std::hypot(u - cx, v - cy);
        const double circle = 0.35 * py * b;
        if (std::abs(u - cx) < pix / 2 + 1e-12 || std::abs(rc - circle) < pix / 2) l.overlay.emplace_back(static_cast<int>(idx), marking);
      }
    }
  return l;
}

ImageGrid render(const Layout& l) {
  const int s = l.size;
  ImageGrid img(s, s, 3);
  auto paint = [&](std::size_t idx, const std::array<double, 3>& c) {
    for (int ch = 0; ch < 3; ++ch) img.pixels[idx * 3 + ch] = c[static_cast<std::size_t>(ch)];
  };
  auto region = [&](int y, int x) {
    if (y < 0 || x < 0 || y >= s || x >= s) return -1;
    return l.region[static_cast<std::size_t>(y) * s + x];
  };
  const auto& palette = Palette::rooms();
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * s + x;
      const int id = l.region[idx];
      paint(idx, id < 0 ? Palette::background : palette.at(l.roles[static_cast<std::size_t>(id)]));
    }
  for (const auto& [idx, c] : l.overlay) paint(static_cast<std::size_t>(idx), c);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const int id = region(y, x);
      if (id < 0) continue;
      bool wall = false;
      // exterior: outside within two pixels
      for (int dy = -2; dy <= 2 && !wall; ++dy)
        for (int dx = -2; dx <= 2 && !wall; ++dx) wall = region(y + dy, x + dx) < 0;
      // interior: a differing neighbour on either side gives a 2 px line
      const int nb[4][2] = {{0, 1}, {0, -1}, {1, 0}, {-1, 0}};
      for (const auto& d : nb) {
        const int o = region(y + d[0], x + d[1]);
        if (o >= 0 && o != id) wall = true;
      }
      if (wall) paint(static_cast<std::size_t>(y) * s + x, Palette::wall);
    }
  return img;
}

std::string format_id(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "fp-%05d", i);
  return buf;
}

void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec || !std::filesystem::is_directory(p)) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

}  // namespace

std::string to_string(BuildingType t) { return info(t).name; }

std::string to_string(FootprintShape s) {
  switch (s) {
    case FootprintShape::rectangle: return "rectangle";
    case FootprintShape::l_shape: return "l_shape";
    case FootprintShape::ellipse: return "ellipse";
    case FootprintShape::rounded_rect: return "rounded_rect";
  }
  return "?";
}

BuildingType parse_building_type(const std::string& s) {
  for (const auto& i : type_table())
    if (s == i.name) return i.type;
  throw ValidationError("unknown building type '" + s + "'");
}

FootprintShape parse_footprint_shape(const std::string& s) {
  for (auto f : {FootprintShape::rectangle, FootprintShape::l_shape, FootprintShape::ellipse, FootprintShape::rounded_rect})
    if (to_string(f) == s) return f;
  throw ValidationError("unknown footprint shape '" + s + "'");
}

std::pair<int, int> room_count_range(BuildingType type) {
  const TypeInfo& i = info(type);
  return {i.rooms_min, i.rooms_max};
}

BuildingSpec default_spec(BuildingType type, std::uint64_t seed) {
  BuildingSpec s;
  s.building_type = type;
  s.seed = seed;
  std::tie(s.rooms_min, s.rooms_max) = room_count_range(type);
  if (type == BuildingType::football_stadium || type == BuildingType::arena) {
    s.footprint = FootprintShape::ellipse;
  } else {
    static constexpr FootprintShape kShapes[] = {FootprintShape::rectangle, FootprintShape::l_shape, FootprintShape::rounded_rect};
    Rng rng(Rng::derive(seed, 0x5a));
    s.footprint = kShapes[rng.uniform_int(0, 2)];
  }
  return s;
}

std::string prompt_from_spec(const BuildingSpec& spec) { return info(spec.building_type).prompt; }

const std::map<std::string, std::array<double, 3>>& Palette::rooms() {
  static const std::map<std::string, std::array<double, 3>> p{
      {"living", {232, 196, 150}},  {"bedroom", {176, 196, 222}},     {"kitchen", {224, 170, 120}},
      {"bath", {150, 200, 210}},    {"corridor", {205, 205, 200}},    {"open_office", {200, 214, 180}},
      {"meeting", {214, 170, 190}}, {"core", {140, 140, 150}},        {"office", {180, 200, 160}},
      {"stacks", {190, 160, 130}},  {"reading", {222, 204, 150}},     {"service", {170, 170, 180}},
      {"hall", {200, 150, 140}},    {"stage", {160, 110, 100}},       {"foyer", {220, 200, 170}},
      {"pitch", {96, 160, 96}},     {"court", {206, 150, 96}},        {"apron", {180, 180, 176}},
      {"seating", {120, 130, 170}}, {"seating_alt", {150, 160, 196}}, {"marking", {200, 226, 200}},
  };
  return p;
}

Sample generate_sample(const BuildingSpec& spec, int size) {
  if (size < 16) throw ValidationError("generate_sample: canvas must be at least 16 px");
  if (spec.rooms_min < 1 || spec.rooms_max < spec.rooms_min) throw ValidationError("generate_sample: invalid room range");
  Rng rng(spec.seed);
  const Footprint fp = make_footprint(spec.footprint, rng);
  const bool bowl = spec.building_type == BuildingType::football_stadium || spec.building_type == BuildingType::arena;
  const Layout layout = bowl ? bowl_layout(spec, fp, rng, size) : bsp_layout(spec, fp, rng, size);

  Sample out;
  out.prompt = prompt_from_spec(spec);
  out.rooms = layout.roles;
  out.mask.pixels = ImageGrid(size, size, 1);
  std::size_t inside = 0;
  for (std::size_t i = 0; i < layout.region.size(); ++i)
    if (layout.region[i] >= 0) {
      out.mask.pixels.pixels[i] = 1.0;
      ++inside;
    }
  if (inside * 4 < layout.region.size()) throw GenerationError("footprint covers less than 25% of the canvas");
  out.plan = render(layout);
  return out;
}

nlohmann::ordered_json DatasetRecord::to_json() const {
  nlohmann::ordered_json j;
  j["id"] = id;
  j["prompt"] = prompt;
  j["mask_path"] = mask_path;
  j["plan_path"] = plan_path;
  j["building_type"] = data::to_string(building_type);
  j["seed"] = seed;
  j["split"] = split;
  return j;
}

DatasetRecord DatasetRecord::from_json(const nlohmann::json& j) {
  DatasetRecord r;
  r.id = j.at("id").get<std::string>();
  r.prompt = j.at("prompt").get<std::string>();
  r.mask_path = j.at("mask_path").get<std::string>();
  r.plan_path = j.at("plan_path").get<std::string>();
  r.building_type = parse_building_type(j.at("building_type").get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.split = j.at("split").get<std::string>();
  if (r.id.empty() || r.prompt.empty()) throw ValidationError("record with empty id or prompt");
  return r;
}

std::vector<const DatasetRecord*> Manifest::split(const std::string& name) const {
  std::vector<const DatasetRecord*> out;
  for (const auto& r : records)
    if (r.split == name) out.push_back(&r);
  return out;
}

std::vector<std::pair<BuildingType, int>> stratify(int n, const std::vector<std::pair<BuildingType, double>>& mix_in) {
  if (n < 1) throw ValidationError("dataset: n must be >= 1");
  std::vector<std::pair<BuildingType, double>> mix = mix_in;
  if (mix.empty())
    for (BuildingType t : kAllBuildingTypes) mix.emplace_back(t, 1.0);
  double total = 0.0;
  for (const auto& [t, w] : mix) {
    if (!(w > 0.0)) throw ValidationError("dataset: type_mix weights must be positive");
    total += w;
  }
  std::vector<std::pair<BuildingType, int>> out;
  std::vector<std::pair<double, std::size_t>> rem;
  int assigned = 0;
  for (std::size_t i = 0; i < mix.size(); ++i) {
    const double exact = n * mix[i].second / total;
    const int base = static_cast<int>(std::floor(exact));
    out.emplace_back(mix[i].first, base);
    rem.emplace_back(exact - base, i);
    assigned += base;
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int k = 0; k < n - assigned; ++k) ++out[rem[static_cast<std::size_t>(k)].second].second;
  return out;
}

Manifest build_dataset(const DatasetOptions& opts, const std::filesystem::path& out_dir) {
  if (opts.image_size < 16) throw ValidationError("dataset: image_size must be >= 16");
  if (opts.val_fraction < 0.0 || opts.val_fraction >= 1.0) throw ValidationError("dataset: val_fraction must be in [0, 1)");
  const auto counts = stratify(opts.n, opts.type_mix);
  ensure_dir(out_dir / "masks");
  ensure_dir(out_dir / "plans");
  if (opts.hires) ensure_dir(out_dir / "hires");

  std::vector<BuildingType> types;
  for (const auto& [t, c] : counts) types.insert(types.end(), static_cast<std::size_t>(c), t);
  Rng order(Rng::derive(opts.seed, 0));
  order.shuffle(types);

  std::vector<std::size_t> idx(types.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng split_rng(Rng::derive(opts.seed, 1));
  split_rng.shuffle(idx);
  const auto n_val = static_cast<std::size_t>(std::floor(opts.n * opts.val_fraction));
  std::vector<bool> is_val(types.size(), false);
  for (std::size_t k = 0; k < n_val; ++k) is_val[idx[k]] = true;

  Manifest m;
  m.root = out_dir;
  for (std::size_t i = 0; i < types.size(); ++i) {
    DatasetRecord r;
    r.id = format_id(static_cast<int>(i));
    r.building_type = types[i];
    r.seed = Rng::derive(opts.seed, 1000 + i);
    const BuildingSpec spec = default_spec(r.building_type, r.seed);
    const Sample s = generate_sample(spec, opts.image_size);
    r.prompt = s.prompt;
    r.mask_path = "masks/" + r.id + ".png";
    r.plan_path = "plans/" + r.id + ".png";
    r.split = is_val[i] ? "val" : "train";
    write_png(out_dir / r.mask_path, s.mask.to_storage());
    write_png(out_dir / r.plan_path, s.plan);
    if (opts.hires) {
      const Sample big = generate_sample(spec, 256);
      write_png(out_dir / "hires" / (r.id + "_mask.png"), big.mask.to_storage());
      write_png(out_dir / "hires" / (r.id + "_plan.png"), big.plan);
    }
    m.records.push_back(std::move(r));
  }
  if (n_val == 0) m.warnings.push_back("validation split is empty");

  std::ofstream out(m.path(), std::ios::binary);
  if (!out) throw IoError("cannot write " + m.path().string());
  for (const auto& r : m.records) out << r.to_json().dump() << '\n';
  if (!out) throw IoError("write failed: " + m.path().string());

  nlohmann::ordered_json meta;
  meta["n"] = opts.n;
  meta["seed"] = opts.seed;
  meta["image_size"] = opts.image_size;
  meta["hires"] = opts.hires;
  meta["val_fraction"] = opts.val_fraction;
  nlohmann::ordered_json cj = nlohmann::ordered_json::object();
  for (const auto& [t, c] : counts) cj[to_string(t)] = c;
  meta["counts"] = cj;
  meta["warnings"] = m.warnings;
  std::ofstream mo(out_dir / "manifest.meta.json", std::ios::binary);
  mo << meta.dump(2) << '\n';
  if (!mo) throw IoError("write failed: manifest.meta.json");
  return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    DatasetRecord r;
    try {
      r = DatasetRecord::from_json(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw LoadError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!seen.insert(r.id).second) throw LoadError(path.string() + ": duplicate id " + r.id);
    m.records.push_back(std::move(r));
  }
  const auto meta_path = m.root / "manifest.meta.json";
  if (std::filesystem::exists(meta_path)) {
    std::ifstream mi(meta_path);
    const auto meta = nlohmann::json::parse(mi, nullptr, false);
    if (!meta.is_discarded() && meta.contains("warnings"))
      for (const auto& w : meta["warnings"]) m.warnings.push_back(w.get<std::string>());
  }
  return m;
}

BatchLoader::BatchLoader(const Manifest& manifest, const std::string& split, int batch_size, std::uint64_t seed)
    : batch_size_(batch_size), seed_(seed) {
  if (batch_size < 1) throw ValidationError("load_batches: batch_size must be >= 1");
  int h = -1, w = -1;
  for (const DatasetRecord* r : manifest.split(split)) {
    Item it{*r, {}, {}};
    ImageGrid plan, mask;
    try {
      plan = read_png(manifest.root / r->plan_path);
      mask = read_png(manifest.root / r->mask_path);
    } catch (const std::exception& e) {
      throw LoadError("record " + r->id + ": " + e.what());
    }
    if (plan.channels != 3) throw LoadError("record " + r->id + ": plan must be RGB");
    if (plan.height != mask.height || plan.width != mask.width)
      throw LoadError("record " + r->id + ": plan and mask sizes differ");
    if (h < 0) {
      h = plan.height;
      w = plan.width;
    } else if (plan.height != h || plan.width != w) {
      throw LoadError("record " + r->id + ": image size differs from the rest of the split");
    }
    it.plan = to_model_space(plan);
    it.mask = control::FootprintMask::from_storage(mask).pixels;
    items_.push_back(std::move(it));
  }
}

std::size_t BatchLoader::batches_per_epoch() const {
  return (items_.size() + static_cast<std::size_t>(batch_size_) - 1) / static_cast<std::size_t>(batch_size_);
}

std::vector<std::size_t> BatchLoader::permutation(int index) const {
  std::vector<std::size_t> p(items_.size());
  std::iota(p.begin(), p.end(), 0);
  Rng rng(Rng::derive(seed_, static_cast<std::uint64_t>(index)));
  rng.shuffle(p);
  return p;
}

std::vector<std::string> BatchLoader::order(int index) const {
  std::vector<std::string> ids;
  for (std::size_t i : permutation(index)) ids.push_back(items_[i].record.id);
  return ids;
}

std::vector<Batch> BatchLoader::epoch(int index) const {
  const auto p = permutation(index);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < p.size(); start += static_cast<std::size_t>(batch_size_)) {
    const std::size_t end = std::min(p.size(), start + static_cast<std::size_t>(batch_size_));
    Batch b;
    std::vector<ImageGrid> plans, masks;
    for (std::size_t k = start; k < end; ++k) {
      const Item& it = items_[p[k]];
      b.ids.push_back(it.record.id);
      b.prompts.push_back(it.record.prompt);
      b.types.push_back(it.record.building_type);
      plans.push_back(it.plan);
      masks.push_back(it.mask);
    }
    b.plans = to_tensor(plans);
    b.masks = to_tensor(masks);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace floorgen::data
