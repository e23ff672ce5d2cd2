#include "skiptune/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "skiptune/errors.hpp"

namespace skiptune {

namespace {

constexpr std::size_t kClasses = 4;

// Glyphs drawn on a [-1, 1] canvas: 0 filled square, 1 ring, 2 plus, 3 diagonal.
void draw_shape(std::vector<double>& img, std::size_t n, int cls, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> jitter(-1, 1);
    std::uniform_real_distribution<double> amp(0.6, 1.0);
    std::normal_distribution<double> noise(0.0, 0.05);
    const double cx = (static_cast<double>(n) - 1.0) / 2.0 + jitter(rng);
    const double cy = (static_cast<double>(n) - 1.0) / 2.0 + jitter(rng);
    const double r = static_cast<double>(n) / 4.0 + 0.5 * jitter(rng);
    const double a = amp(rng);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
            bool on = false;
            switch (cls) {
                case 0: on = std::abs(dx) <= r && std::abs(dy) <= r; break;
                case 1: {
                    const double d = std::sqrt(dx * dx + dy * dy);
                    on = d >= r - 0.6 && d <= r + 0.9;
                    break;
                }
                case 2: on = (std::abs(dx) <= 0.6 && std::abs(dy) <= r + 1) || (std::abs(dy) <= 0.6 && std::abs(dx) <= r + 1); break;
                default: on = std::abs(dx - dy) <= 0.8 && std::abs(dx) <= r + 1; break;
            }
            const double v = on ? a : -a;
            img[y * n + x] = std::clamp(v + noise(rng), -1.0, 1.0);
        }
}

void draw_gmm(std::vector<double>& img, std::size_t n, int cls, std::mt19937_64& rng) {
    std::normal_distribution<double> noise(0.0, 0.25);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double u = static_cast<double>(x) / static_cast<double>(n), v = static_cast<double>(y) / static_cast<double>(n);
            double mean = 0.0;
            switch (cls) {
                case 0: mean = std::cos(2.0 * std::numbers::pi * u); break;
                case 1: mean = std::cos(2.0 * std::numbers::pi * v); break;
                case 2: mean = u + v - 1.0; break;
                default: mean = -0.5; break;
            }
            img[y * n + x] = 0.7 * mean + noise(rng);
        }
}

}  // namespace

std::size_t Dataset::num_classes() const {
    if (labels.empty()) return 0;
    return static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > size()) throw DimensionError("dataset slice out of range");
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    Dataset d;
    d.name = name;
    d.seed = seed;
    d.images = gather(idx);
    d.labels = gather_labels(idx);
    return d;
}

Tensor Dataset::gather(const std::vector<std::size_t>& index) const {
    Shape shape = images.shape();
    const std::size_t item = size() ? images.numel() / size() : 0;
    shape[0] = index.size();
    std::vector<double> out(index.size() * item);
    auto src = images.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= size()) throw DimensionError("dataset index out of range");
        std::copy_n(src.data() + index[i] * item, item, out.data() + i * item);
    }
    return Tensor::from(shape, std::move(out));
}

std::vector<int> Dataset::gather_labels(const std::vector<std::size_t>& index) const {
    if (labels.empty()) return {};
    std::vector<int> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) out[i] = labels.at(index[i]);
    return out;
}

Dataset generate_dataset(const std::string& kind, std::size_t count, std::size_t image_size, std::uint64_t seed) {
    if (kind != "shapes" && kind != "gmm") throw ConfigError("unknown dataset kind '" + kind + "'");
    if (count == 0 || image_size < 4) throw ConfigError("dataset needs count >= 1 and image_size >= 4");
    const std::size_t pixels = image_size * image_size;
    std::vector<double> data(count * pixels);
    std::vector<int> labels(count);
    std::vector<double> img(pixels);
    for (std::size_t i = 0; i < count; ++i) {
        std::seed_seq seq{seed, static_cast<std::uint64_t>(i)};
        std::mt19937_64 rng(seq);
        const int cls = static_cast<int>(i % kClasses);
        if (kind == "shapes")
            draw_shape(img, image_size, cls, rng);
        else
            draw_gmm(img, image_size, cls, rng);
        std::copy(img.begin(), img.end(), data.begin() + i * pixels);
        labels[i] = cls;
    }
    return make_dataset(kind, Tensor::from({count, 1, image_size, image_size}, std::move(data)), std::move(labels),
                        seed);
}

Dataset make_dataset(const std::string& name, Tensor images, std::vector<int> labels, std::uint64_t seed) {
    if (images.rank() != 4) throw DimensionError("dataset images must be [N, C, H, W]");
    if (!labels.empty() && labels.size() != images.dim(0)) throw DimensionError("dataset label count mismatch");
    Dataset d;
    d.name = name;
    d.images = std::move(images);
    d.labels = std::move(labels);
    d.seed = seed;
    return d;
}

void save_dataset(const Dataset& data, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open dataset for writing: " + path);
    const auto& s = data.images.shape();
    os << "skiptune-dataset 1\n"
       << "name " << (data.name.empty() ? "unnamed" : data.name) << "\n"
       << "shape " << s[0] << ' ' << s[1] << ' ' << s[2] << ' ' << s[3] << "\n"
       << "dtype float64-le\n"
       << "labels " << (data.labelled() ? "int32-le" : "none") << "\n"
       << "seed " << data.seed << "\n"
       << "end\n";
    for (double v : data.images.data()) binio::put_f64(os, v);
    for (int l : data.labels) binio::put_i32(os, l);
    if (!os) throw IoError("failed writing dataset: " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open dataset: " + path);
    std::string line;
    if (!std::getline(is, line) || line != "skiptune-dataset 1") throw IoError("not a dataset file: " + path);
    Dataset d;
    Shape shape;
    bool labelled = false, ended = false;
    while (std::getline(is, line)) {
        if (line == "end") {
            ended = true;
            break;
        }
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "name") {
            ls >> d.name;
        } else if (key == "shape") {
            shape.assign(4, 0);
            for (auto& v : shape) ls >> v;
        } else if (key == "dtype") {
            std::string t;
            ls >> t;
            if (t != "float64-le") throw IoError("unsupported dtype " + t);
        } else if (key == "labels") {
            std::string t;
            ls >> t;
            if (t != "none" && t != "int32-le") throw IoError("unsupported label type " + t);
            labelled = t == "int32-le";
        } else if (key == "seed") {
            ls >> d.seed;
        } else {
            throw IoError("unknown dataset header key '" + key + "'");
        }
        if (ls.fail()) throw IoError("malformed dataset header line: " + line);
    }
    if (!ended || shape.size() != 4) throw IoError("incomplete dataset header: " + path);
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = binio::get_f64(is);
    d.images = Tensor::from(shape, std::move(values));
    if (labelled) {
        d.labels.resize(shape[0]);
        for (int& l : d.labels) l = binio::get_i32(is);
    }
    return d;
}

}  // namespace skiptune
