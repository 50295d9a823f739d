#include "ct/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace ct::synthdata {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kGray = 128.0 / 255.0;

double q8(double v) {
    v = std::min(1.0, std::max(0.0, v));
    return std::round(v * 255.0) / 255.0;
}

struct Color {
    double r, g, b;
};

void put_px(Tensor& img, int x, int y, const Color& c) {
    int h = img.shape[1], w = img.shape[2];
    if (x < 0 || x >= w || y < 0 || y >= h) return;
    img.at3(0, y, x) = c.r;
    img.at3(1, y, x) = c.g;
    img.at3(2, y, x) = c.b;
}

// filled disc
void draw_disc(Tensor& img, double cx, double cy, double rad, const Color& c) {
    for (int y = static_cast<int>(cy - rad) - 1; y <= static_cast<int>(cy + rad) + 1; ++y)
        for (int x = static_cast<int>(cx - rad) - 1; x <= static_cast<int>(cx + rad) + 1; ++x) {
            double dx = x - cx, dy = y - cy;
            if (dx * dx + dy * dy <= rad * rad) put_px(img, x, y, c);
        }
}

void draw_limb(Tensor& img, Tensor* part_map, double part_value, double x0, double y0, double x1,
               double y1, double thick, const Color& c) {
    double len = std::hypot(x1 - x0, y1 - y0);
    int steps = std::max(2, static_cast<int>(len * 2));
    for (int s = 0; s <= steps; ++s) {
        double t = static_cast<double>(s) / steps;
        double px = x0 + t * (x1 - x0);
        double py = y0 + t * (y1 - y0);
        for (int dy = -static_cast<int>(thick); dy <= static_cast<int>(thick); ++dy)
            for (int dx = -static_cast<int>(thick); dx <= static_cast<int>(thick); ++dx) {
                if (dx * dx + dy * dy > thick * thick) continue;
                int xi = static_cast<int>(px) + dx;
                int yi = static_cast<int>(py) + dy;
                put_px(img, xi, yi, c);
                if (part_map && xi >= 0 && yi >= 0 && xi < part_map->shape[1] &&
                    yi < part_map->shape[0])
                    part_map->at2(yi, xi) = part_value;
            }
    }
}

Color texture_color(TextureFamily fam, double u, double v, const Color& a, const Color& b,
                    double period) {
    switch (fam) {
        case TextureFamily::stripes: {
            int band = static_cast<int>(std::floor((u + v * 0.5) / period));
            return (band % 2 + 2) % 2 == 0 ? a : b;
        }
        case TextureFamily::checker: {
            int cu = static_cast<int>(std::floor(u / period));
            int cv = static_cast<int>(std::floor(v / period));
            return ((cu + cv) % 2 + 2) % 2 == 0 ? a : b;
        }
        case TextureFamily::dots: {
            double mu = u - std::floor(u / period) * period - period / 2;
            double mv = v - std::floor(v / period) * period - period / 2;
            return (mu * mu + mv * mv <= period * period / 9.0) ? b : a;
        }
    }
    return a;
}

}  // namespace

TextureFamily texture_from_string(const std::string& s) {
    if (s == "stripes") return TextureFamily::stripes;
    if (s == "checker") return TextureFamily::checker;
    if (s == "dots") return TextureFamily::dots;
    throw ValidationError("unknown texture family: " + s);
}

std::string to_string(TextureFamily f) {
    switch (f) {
        case TextureFamily::stripes: return "stripes";
        case TextureFamily::checker: return "checker";
        case TextureFamily::dots: return "dots";
    }
    return "stripes";
}

void SceneConfig::validate() const {
    if (width < 16 || height < 16) throw ValidationError("scene: resolution too small");
    if (frames < 1) throw ValidationError("scene: frames must be >= 1");
    if (!(mask_area_min > 0.0) || !(mask_area_max < 0.5) || mask_area_min >= mask_area_max)
        throw ValidationError("scene: mask area range must lie inside (0, 0.5)");
}

void SampleTuple::validate() const {
    std::size_t n = source.size();
    if (n == 0) throw LoadError("sample: no frames");
    if (agnostic.size() != n || masks.size() != n || poses.size() != n)
        throw LoadError("sample: frame count mismatch across tuple members");
    for (std::size_t i = 0; i < n; ++i) {
        if (!source[i].same_shape(agnostic[i]))
            throw LoadError("sample: source/agnostic shape mismatch at frame " +
                            std::to_string(i));
        for (double v : masks[i].data)
            if (v != 0.0 && v != 1.0)
                throw LoadError("sample: mask is not binary at frame " + std::to_string(i));
    }
    if (garment.rank() != 3) throw LoadError("sample: missing garment image");
}

SceneResult generate_scene(const SceneConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    int W = cfg.width, H = cfg.height, N = cfg.frames;

    TextureFamily fam = cfg.texture;
    if (cfg.mixed_textures) {
        TextureFamily fams[3] = {TextureFamily::stripes, TextureFamily::checker,
                                 TextureFamily::dots};
        fam = fams[rng.below(3)];
    }

    // palette
    Color bg0{0.15 + 0.25 * rng.uniform(), 0.15 + 0.25 * rng.uniform(),
              0.25 + 0.35 * rng.uniform()};
    Color bg1{bg0.r + 0.25, bg0.g + 0.2, bg0.b + 0.1};
    Color limb{0.08, 0.06, 0.08};
    Color skin{0.85, 0.7, 0.55};
    Color tex_a{0.55 + 0.4 * rng.uniform(), 0.15 + 0.3 * rng.uniform(),
                0.15 + 0.3 * rng.uniform()};
    Color tex_b{0.1 + 0.3 * rng.uniform(), 0.45 + 0.4 * rng.uniform(),
                0.55 + 0.4 * rng.uniform()};
    double period = 5.0 + 4.0 * rng.uniform();

    // garment rectangle sized from the mask-area budget (scale stays in
    // [1-s_amp, 1+s_amp], so target the middle of the range)
    double s_amp = 0.08 * cfg.motion_amplitude;
    double frac = cfg.mask_area_min +
                  (cfg.mask_area_max - cfg.mask_area_min) * (0.35 + 0.3 * rng.uniform());
    double gw = std::sqrt(frac * W * H * 1.3);
    double gh = gw / 1.3;

    // motion parameters
    double phase = rng.uniform(0.0, 2 * kPi);
    double phase2 = rng.uniform(0.0, 2 * kPi);
    double amp_x = 0.10 * W * cfg.motion_amplitude;
    double amp_y = 0.03 * H * cfg.motion_amplitude;
    double theta0 = rng.uniform(-0.15, 0.15);
    double theta_amp = 0.22 * cfg.motion_amplitude;

    double margin = 0.5 * std::hypot(gw, gh) * (1.0 + s_amp) + 1.0;
    double cx0 = W / 2.0;
    double cy0 = H * 0.45;

    SceneResult res;
    res.texture = fam;
    SampleTuple& tup = res.tuple;

    // canonical garment image: textured rect centered on a gray canvas
    tup.garment = Tensor({3, H, W}, kGray);
    double gcx = W / 2.0, gcy = H / 2.0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double u = x - gcx, v = y - gcy;
            if (std::fabs(u) <= gw / 2 && std::fabs(v) <= gh / 2) {
                Color c = texture_color(fam, u, v, tex_a, tex_b, period);
                tup.garment.at3(0, y, x) = c.r;
                tup.garment.at3(1, y, x) = c.g;
                tup.garment.at3(2, y, x) = c.b;
            }
        }
    for (double& v : tup.garment.data) v = q8(v);

    for (int f = 0; f < N; ++f) {
        double tphase = N == 1 ? 0.0 : 2 * kPi * f / N;

        Tensor src({3, H, W});
        // background: gradient + soft checker
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double g = static_cast<double>(y) / H;
                double chk = ((x / 12 + y / 12) % 2 == 0) ? 0.035 : -0.035;
                src.at3(0, y, x) = bg0.r * (1 - g) + bg1.r * g + chk;
                src.at3(1, y, x) = bg0.g * (1 - g) + bg1.g * g + chk;
                src.at3(2, y, x) = bg0.b * (1 - g) + bg1.b * g + chk;
            }

        // stick figure
        double px = cx0 + amp_x * std::sin(tphase + phase);
        double py = cy0 + 0.22 * H + amp_y * std::sin(2 * tphase + phase2);
        double torso = 0.28 * H;
        double nx = px, ny = py - torso;
        double head_r = 0.06 * H;
        double arm = 0.20 * H, leg = 0.24 * H;
        double swing = 0.6 * cfg.motion_amplitude;
        double a_l = kPi * 0.75 + swing * 0.5 * std::sin(tphase + phase);
        double a_r = kPi * 0.25 - swing * 0.5 * std::sin(tphase + phase);
        double l_l = kPi * 0.60 + swing * 0.35 * std::sin(tphase + phase2);
        double l_r = kPi * 0.40 - swing * 0.35 * std::sin(tphase + phase2);
        double hand_lx = nx + arm * std::cos(a_l), hand_ly = ny + arm * std::sin(a_l);
        double hand_rx = nx + arm * std::cos(a_r), hand_ry = ny + arm * std::sin(a_r);
        double foot_lx = px + leg * std::cos(l_l) * 0.6, foot_ly = py + leg * std::sin(l_l);
        double foot_rx = px + leg * std::cos(l_r) * 0.6, foot_ry = py + leg * std::sin(l_r);
        double head_x = nx, head_y = ny - head_r * 1.4;

        Tensor part({H, W});
        draw_limb(src, &part, 1.0 / 6, nx, ny, px, py, 1.4, limb);                    // torso
        draw_limb(src, &part, 2.0 / 6, nx, ny, hand_lx, hand_ly, 1.1, limb);          // arm L
        draw_limb(src, &part, 3.0 / 6, nx, ny, hand_rx, hand_ry, 1.1, limb);          // arm R
        draw_limb(src, &part, 4.0 / 6, px, py, foot_lx, foot_ly, 1.1, limb);          // leg L
        draw_limb(src, &part, 5.0 / 6, px, py, foot_rx, foot_ry, 1.1, limb);          // leg R
        draw_disc(src, head_x, head_y, head_r, skin);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double dx = x - head_x, dy = y - head_y;
                if (dx * dx + dy * dy <= head_r * head_r) part.at2(y, x) = 1.0;       // head
            }

        // garment patch over the torso midpoint
        GarmentPlacement pl;
        pl.cx = std::clamp(nx, margin, W - margin);
        pl.cy = std::clamp(ny + torso * 0.45, margin, H - margin);
        pl.theta = theta0 + theta_amp * std::sin(tphase + phase2);
        pl.scale = 1.0 + s_amp * std::sin(tphase + phase);
        res.placements.push_back(pl);

        Tensor mask({H, W});
        double ct = std::cos(pl.theta), st = std::sin(pl.theta);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                // inverse map into canonical garment-image coordinates
                double rx = (x - pl.cx) / pl.scale, ry = (y - pl.cy) / pl.scale;
                double u = ct * rx + st * ry;
                double v = -st * rx + ct * ry;
                if (std::fabs(u) <= gw / 2 && std::fabs(v) <= gh / 2) {
                    int gx = static_cast<int>(std::lround(gcx + u));
                    int gy = static_cast<int>(std::lround(gcy + v));
                    gx = std::clamp(gx, 0, W - 1);
                    gy = std::clamp(gy, 0, H - 1);
                    mask.at2(y, x) = 1.0;
                    src.at3(0, y, x) = tup.garment.at3(0, gy, gx);
                    src.at3(1, y, x) = tup.garment.at3(1, gy, gx);
                    src.at3(2, y, x) = tup.garment.at3(2, gy, gx);
                }
            }

        for (double& v : src.data) v = q8(v);

        Tensor agn = src;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (mask.at2(y, x) == 1.0) {
                    agn.at3(0, y, x) = q8(kGray);
                    agn.at3(1, y, x) = q8(kGray);
                    agn.at3(2, y, x) = q8(kGray);
                }

        // pose map: 7 keypoint heatmaps + the part-index map
        Tensor pose({kPoseChannels, H, W});
        double kp[7][2] = {{head_x, head_y},   {nx, ny},           {px, py},
                           {hand_lx, hand_ly}, {hand_rx, hand_ry}, {foot_lx, foot_ly},
                           {foot_rx, foot_ry}};
        double sigma = 2.0;
        for (int k = 0; k < 7; ++k)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    double dx = x - kp[k][0], dy = y - kp[k][1];
                    double d2 = dx * dx + dy * dy;
                    if (d2 < 36 * sigma * sigma)
                        pose.at3(k, y, x) = q8(std::exp(-d2 / (2 * sigma * sigma)));
                }
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) pose.at3(7, y, x) = q8(part.at2(y, x));

        tup.source.push_back(std::move(src));
        tup.agnostic.push_back(std::move(agn));
        tup.masks.push_back(std::move(mask));
        tup.poses.push_back(std::move(pose));
    }
    return res;
}

// ----------------------------------------------------------------- netpbm io

namespace {

void write_pnm(const std::string& path, const Tensor& img, bool color) {
    int channels = color ? 3 : 1;
    int h = color ? img.shape[1] : img.shape[0];
    int w = color ? img.shape[2] : img.shape[1];
    std::ofstream out(path, std::ios::binary);
    if (!out) throw StateError("cannot open for writing: " + path);
    out << (color ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c) {
                double v = color ? img.at3(c, y, x) : img.at2(y, x);
                int q = static_cast<int>(std::lround(v * 255.0));
                buf[(static_cast<std::size_t>(y) * w + x) * channels + c] =
                    static_cast<unsigned char>(std::clamp(q, 0, 255));
            }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw StateError("write failed: " + path);
}

Tensor read_pnm(const std::string& path, bool color) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open image: " + path);
    std::string magic;
    in >> magic;
    if (magic != (color ? "P6" : "P5")) throw LoadError("bad netpbm magic in " + path);
    auto skip_ws = [&] {
        while (true) {
            int c = in.peek();
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
    };
    int w, h, maxval;
    skip_ws(); in >> w;
    skip_ws(); in >> h;
    skip_ws(); in >> maxval;
    if (!in || maxval != 255 || w < 1 || h < 1) throw LoadError("bad netpbm header in " + path);
    in.get();  // single whitespace after maxval
    int channels = color ? 3 : 1;
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * channels);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw LoadError("truncated image data in " + path);
    Tensor img = color ? Tensor({3, h, w}) : Tensor({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c) {
                double v = buf[(static_cast<std::size_t>(y) * w + x) * channels + c] / 255.0;
                if (color)
                    img.at3(c, y, x) = v;
                else
                    img.at2(y, x) = v;
            }
    return img;
}

std::string frame_name(int i, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%04d.%s", i, ext);
    return buf;
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& rgb) {
    if (rgb.rank() != 3 || rgb.shape[0] != 3) throw ValidationError("write_ppm: [3,H,W] required");
    write_pnm(path, rgb, true);
}
Tensor read_ppm(const std::string& path) { return read_pnm(path, true); }

void write_pgm(const std::string& path, const Tensor& gray) {
    if (gray.rank() != 2) throw ValidationError("write_pgm: [H,W] required");
    write_pnm(path, gray, false);
}
Tensor read_pgm(const std::string& path) { return read_pnm(path, false); }

void write_sample(const std::string& dir, const SampleTuple& tuple, const std::string& meta_json) {
    tuple.validate();
    fs::create_directories(dir);
    for (const char* sub : {"source", "agnostic", "mask", "pose"})
        fs::create_directories(fs::path(dir) / sub);
    int n = tuple.frames();
    int H = tuple.source[0].shape[1], W = tuple.source[0].shape[2];
    for (int i = 0; i < n; ++i) {
        write_ppm((fs::path(dir) / "source" / frame_name(i, "ppm")).string(), tuple.source[i]);
        write_ppm((fs::path(dir) / "agnostic" / frame_name(i, "ppm")).string(), tuple.agnostic[i]);
        write_pgm((fs::path(dir) / "mask" / frame_name(i, "pgm")).string(), tuple.masks[i]);
        // pose channels tiled horizontally into one grayscale image
        int P = tuple.poses[i].shape[0];
        Tensor tiled({H, P * W});
        for (int c = 0; c < P; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) tiled.at2(y, c * W + x) = tuple.poses[i].at3(c, y, x);
        write_pgm((fs::path(dir) / "pose" / frame_name(i, "pgm")).string(), tiled);
    }
    write_ppm((fs::path(dir) / "garment.ppm").string(), tuple.garment);
    std::ofstream meta((fs::path(dir) / "meta.json").string());
    if (!meta) throw StateError("cannot write meta.json in " + dir);
    meta << meta_json;
}

std::string read_sample_meta(const std::string& dir) {
    std::ifstream in((fs::path(dir) / "meta.json").string());
    if (!in) throw LoadError("missing meta.json in " + dir);
    std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return s;
}

SampleTuple read_sample(const std::string& dir) {
    std::string meta_s = read_sample_meta(dir);
    json meta = json::parse(meta_s, nullptr, false);
    if (meta.is_discarded()) throw LoadError("corrupt meta.json in " + dir);
    int n = meta.value("frames", 0);
    int pose_channels = meta.value("pose_channels", kPoseChannels);
    if (n < 1) throw LoadError("meta.json missing frame count in " + dir);

    SampleTuple t;
    for (int i = 0; i < n; ++i) {
        t.source.push_back(read_ppm((fs::path(dir) / "source" / frame_name(i, "ppm")).string()));
        t.agnostic.push_back(
            read_ppm((fs::path(dir) / "agnostic" / frame_name(i, "ppm")).string()));
        // masks are stored as 0/255 so the decoded values must be exactly 0/1
        Tensor raw = read_pgm((fs::path(dir) / "mask" / frame_name(i, "pgm")).string());
        for (double v : raw.data)
            if (v != 0.0 && v != 1.0)
                throw LoadError("non-binary mask value in " +
                                (fs::path(dir) / "mask" / frame_name(i, "pgm")).string());
        t.masks.push_back(std::move(raw));
        Tensor tiled = read_pgm((fs::path(dir) / "pose" / frame_name(i, "pgm")).string());
        int H = tiled.shape[0];
        if (tiled.shape[1] % pose_channels)
            throw LoadError("pose image width not divisible by channel count in " + dir);
        int W = tiled.shape[1] / pose_channels;
        Tensor pose({pose_channels, H, W});
        for (int c = 0; c < pose_channels; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) pose.at3(c, y, x) = tiled.at2(y, c * W + x);
        t.poses.push_back(std::move(pose));
    }
    t.garment = read_ppm((fs::path(dir) / "garment.ppm").string());
    t.validate();
    return t;
}

Dataset::Dataset(const std::string& root) {
    if (!fs::is_directory(root)) throw LoadError("dataset root is not a directory: " + root);
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && fs::exists(e.path() / "meta.json"))
            dirs_.push_back(e.path().string());
    std::sort(dirs_.begin(), dirs_.end());
    if (dirs_.empty()) throw LoadError("no samples found under " + root);
}

SampleTuple Dataset::load(std::size_t i) const {
    if (i >= dirs_.size()) throw ValidationError("dataset index out of range");
    return read_sample(dirs_[i]);
}

void generate_dataset(const std::string& out, int count, const SceneConfig& base) {
    if (count < 1) throw ValidationError("generate_dataset: count must be >= 1");
    fs::create_directories(out);
    for (int i = 0; i < count; ++i) {
        SceneConfig cfg = base;
        cfg.seed = base.seed + static_cast<std::uint64_t>(i);
        SceneResult res = generate_scene(cfg);
        json meta;
        meta["sample_id"] = i;
        meta["seed"] = cfg.seed;
        meta["frames"] = cfg.frames;
        meta["pose_channels"] = kPoseChannels;
        meta["width"] = cfg.width;
        meta["height"] = cfg.height;
        meta["texture"] = to_string(res.texture);
        meta["mask_area"] = {cfg.mask_area_min, cfg.mask_area_max};
        meta["motion_amplitude"] = cfg.motion_amplitude;
        json placements = json::array();
        for (const auto& p : res.placements)
            placements.push_back({{"cx", p.cx}, {"cy", p.cy}, {"theta", p.theta},
                                  {"scale", p.scale}});
        meta["placements"] = placements;
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%05d", i);
        write_sample((fs::path(out) / name).string(), res.tuple, meta.dump(2));
    }
}

}  // namespace ct::synthdata
