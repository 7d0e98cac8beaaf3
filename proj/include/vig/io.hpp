#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vig/core.hpp"
#include "vig/ops.hpp"

namespace vig {

// ---------------------------------------------------------------------------
// Tensor container ("VIGT"): magic, version u32, tensor count u32, then per
// tensor: name length u32 + UTF-8 name, rank u32, dims u64 each, dtype u8,
// raw data. All multi-byte integers and floats little-endian regardless of
// host. dtype 1 = IEEE-754 32-bit float, dtype 2 = raw bytes.
// ---------------------------------------------------------------------------

inline constexpr char kTensorFileMagic[4] = {'V', 'I', 'G', 'T'};
inline constexpr std::uint32_t kTensorFileVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;
inline constexpr std::uint8_t kDtypeU8 = 2;

struct TensorFileEntry {
    std::string name;
    Shape shape;
    std::uint8_t dtype = kDtypeF32;
    std::vector<float> f32;         // dtype 1
    std::vector<std::uint8_t> u8;   // dtype 2
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

struct ByteReader {
    const std::string& buf;
    std::size_t off = 0;
    std::string context;

    void need(std::size_t n, const char* what) const {
        if (off + n > buf.size())
            throw FormatError("tensor container truncated at offset " + std::to_string(off) +
                              " while reading " + what +
                              (context.empty() ? "" : " of tensor '" + context + "'"));
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
        off += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
        off += 8;
        return v;
    }
    std::uint8_t u8v(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(buf[off++]);
    }
};

}  // namespace detail

class TensorFile {
public:
    void add(const std::string& name, const Tensor<float>& t) {
        check_unique(name);
        TensorFileEntry e;
        e.name = name;
        e.shape = t.shape;
        e.dtype = kDtypeF32;
        e.f32 = t.data;
        entries_.push_back(std::move(e));
    }

    void add_bytes(const std::string& name, const std::string& bytes) {
        check_unique(name);
        TensorFileEntry e;
        e.name = name;
        e.shape = {bytes.size()};
        e.dtype = kDtypeU8;
        e.u8.assign(bytes.begin(), bytes.end());
        entries_.push_back(std::move(e));
    }

    const std::vector<TensorFileEntry>& entries() const { return entries_; }

    const TensorFileEntry* find(const std::string& name) const {
        for (const TensorFileEntry& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    const TensorFileEntry& require(const std::string& name) const {
        const TensorFileEntry* e = find(name);
        if (!e) throw FormatError("tensor container: missing tensor '" + name + "'");
        return *e;
    }

    Tensor<float> tensor(const std::string& name) const {
        const TensorFileEntry& e = require(name);
        if (e.dtype != kDtypeF32)
            throw FormatError("tensor container: tensor '" + name + "' is not float32");
        return Tensor<float>(e.shape, e.f32);
    }

    std::string bytes(const std::string& name) const {
        const TensorFileEntry& e = require(name);
        if (e.dtype != kDtypeU8)
            throw FormatError("tensor container: tensor '" + name + "' is not raw bytes");
        return std::string(e.u8.begin(), e.u8.end());
    }

    std::string serialize() const {
        std::string out(kTensorFileMagic, 4);
        detail::put_u32(out, kTensorFileVersion);
        detail::put_u32(out, static_cast<std::uint32_t>(entries_.size()));
        for (const TensorFileEntry& e : entries_) {
            detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
            out += e.name;
            detail::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
            for (std::size_t d : e.shape) detail::put_u64(out, d);
            out.push_back(static_cast<char>(e.dtype));
            if (e.dtype == kDtypeF32)
                for (float f : e.f32) detail::put_f32(out, f);
            else
                out.append(e.u8.begin(), e.u8.end());
        }
        return out;
    }

    void write(const std::filesystem::path& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot open '" + path.string() + "' for writing");
        const std::string bytes = serialize();
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw DataError("write failed for '" + path.string() + "'");
    }

    static TensorFile parse(const std::string& buf) {
        detail::ByteReader r{buf};
        if (buf.size() < 4 || std::memcmp(buf.data(), kTensorFileMagic, 4) != 0)
            throw FormatError("tensor container: bad magic at offset 0");
        r.off = 4;
        const std::uint32_t version = r.u32("version");
        if (version != kTensorFileVersion)
            throw FormatError("tensor container: unsupported version " + std::to_string(version) +
                              " at offset 4");
        const std::uint32_t count = r.u32("tensor count");
        TensorFile tf;
        for (std::uint32_t i = 0; i < count; ++i) {
            TensorFileEntry e;
            const std::uint32_t name_len = r.u32("name length");
            r.context.clear();
            r.need(name_len, "name");
            e.name.assign(buf.data() + r.off, name_len);
            r.off += name_len;
            r.context = e.name;
            const std::uint32_t rank = r.u32("rank");
            std::size_t numel = 1;
            for (std::uint32_t a = 0; a < rank; ++a) {
                const std::uint64_t d = r.u64("dimension");
                e.shape.push_back(static_cast<std::size_t>(d));
                numel *= static_cast<std::size_t>(d);
            }
            e.dtype = r.u8v("dtype");
            if (e.dtype == kDtypeF32) {
                r.need(numel * 4, "data");
                e.f32.resize(numel);
                for (std::size_t p = 0; p < numel; ++p) {
                    std::uint32_t v = 0;
                    for (int b = 0; b < 4; ++b)
                        v |= static_cast<std::uint32_t>(
                                 static_cast<unsigned char>(buf[r.off + 4 * p + b]))
                             << (8 * b);
                    float fv;
                    std::memcpy(&fv, &v, 4);
                    e.f32[p] = fv;
                }
                r.off += numel * 4;
            } else if (e.dtype == kDtypeU8) {
                r.need(numel, "data");
                e.u8.assign(buf.begin() + static_cast<std::ptrdiff_t>(r.off),
                            buf.begin() + static_cast<std::ptrdiff_t>(r.off + numel));
                r.off += numel;
            } else {
                throw FormatError("tensor container: unknown dtype " + std::to_string(e.dtype) +
                                  " for tensor '" + e.name + "' at offset " +
                                  std::to_string(r.off - 1));
            }
            for (const TensorFileEntry& prev : tf.entries_)
                if (prev.name == e.name)
                    throw FormatError("tensor container: duplicate tensor name '" + e.name + "'");
            tf.entries_.push_back(std::move(e));
        }
        if (r.off != buf.size())
            throw FormatError("tensor container: " + std::to_string(buf.size() - r.off) +
                              " trailing bytes at offset " + std::to_string(r.off));
        return tf;
    }

    static TensorFile read(const std::filesystem::path& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot open '" + path.string() + "'");
        std::ostringstream ss;
        ss << f.rdbuf();
        return parse(ss.str());
    }

private:
    void check_unique(const std::string& name) const {
        if (find(name)) throw ConfigError("tensor container: duplicate tensor name '" + name + "'");
    }

    std::vector<TensorFileEntry> entries_;
};

// ---------------------------------------------------------------------------
// Manifest: one header line, then `relative_path<TAB>label_spec` records.
// ---------------------------------------------------------------------------

struct ManifestRecord {
    std::string path;  // relative to the manifest directory
    std::vector<std::size_t> labels;
};

struct Manifest {
    std::size_t channels = 0, height = 0, width = 0, classes = 0;
    Task task = Task::Multiclass;
    std::vector<ManifestRecord> records;
    std::filesystem::path base_dir;

    std::string header() const {
        std::ostringstream os;
        os << "#channels=" << channels << " height=" << height << " width=" << width
           << " classes=" << classes << " task=" << task_to_string(task);
        return os.str();
    }
};

inline std::string label_spec_string(const std::vector<std::size_t>& labels) {
    std::string out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (i) out += ';';
        out += std::to_string(labels[i]);
    }
    return out;
}

inline Manifest parse_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open manifest '" + path.string() + "'");
    Manifest m;
    m.base_dir = path.parent_path();
    std::string line;
    if (!std::getline(f, line) || line.empty() || line[0] != '#')
        throw DataError("manifest '" + path.string() + "': missing header line");
    {
        std::istringstream hs(line.substr(1));
        std::string field;
        bool saw[5] = {false, false, false, false, false};
        while (hs >> field) {
            const std::size_t eq = field.find('=');
            if (eq == std::string::npos)
                throw DataError("manifest header field '" + field + "' is not key=value");
            const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
            if (key == "channels") m.channels = std::stoul(val), saw[0] = true;
            else if (key == "height") m.height = std::stoul(val), saw[1] = true;
            else if (key == "width") m.width = std::stoul(val), saw[2] = true;
            else if (key == "classes") m.classes = std::stoul(val), saw[3] = true;
            else if (key == "task") m.task = task_from_string(val), saw[4] = true;
            else throw DataError("manifest header: unknown field '" + key + "'");
        }
        for (bool s : saw)
            if (!s) throw DataError("manifest header missing a required field: " + line);
    }
    std::size_t line_no = 1;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw DataError("manifest line " + std::to_string(line_no) +
                            ": expected <path>\\t<labels>");
        ManifestRecord rec;
        rec.path = line.substr(0, tab);
        std::istringstream ls(line.substr(tab + 1));
        std::string tok;
        while (std::getline(ls, tok, ';')) {
            if (tok.empty()) continue;
            const std::size_t label = std::stoul(tok);
            if (label >= m.classes)
                throw DataError("manifest line " + std::to_string(line_no) + " ('" + rec.path +
                                "'): label " + std::to_string(label) + " >= classes " +
                                std::to_string(m.classes));
            rec.labels.push_back(label);
        }
        if (m.task == Task::Multiclass && rec.labels.size() != 1)
            throw DataError("manifest line " + std::to_string(line_no) + " ('" + rec.path +
                            "'): multiclass records need exactly one label");
        m.records.push_back(std::move(rec));
    }
    return m;
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot open manifest '" + path.string() + "' for writing");
    f << m.header() << "\n";
    for (const ManifestRecord& r : m.records) f << r.path << "\t" << label_spec_string(r.labels)
                                                << "\n";
    if (!f) throw DataError("manifest write failed: '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct Sample {
    std::string path;                      // identity for split disjointness
    Tensor<float> image;                   // [C,H,W]
    Tensor<float> labels;                  // [N] one-/multi-hot
    std::vector<std::size_t> label_list;   // sorted class indices
};

struct Dataset {
    std::size_t channels = 0, height = 0, width = 0, classes = 0;
    Task task = Task::Multiclass;
    std::vector<Sample> samples;

    std::size_t size() const { return samples.size(); }
};

/// Plain (non-tape) bilinear resize of one [h,w] band, via the tensor op.
inline Tensor<float> resize_band(const Tensor<float>& band, std::size_t out_h, std::size_t out_w) {
    if (band.rank() != 2) throw DataError("band tensor must be rank 2, got " + shape_str(band.shape));
    if (band.shape[0] == out_h && band.shape[1] == out_w) return band;
    Tape<float> tape;
    Var<float> x = tape.value(Tensor<float>({1, 1, band.shape[0], band.shape[1]}, band.data));
    Var<float> y = bilinear_resize(x, out_h, out_w);
    return Tensor<float>({out_h, out_w}, tape.val(y).data);
}

/// Loads every manifest record: per-band tensors are bilinear-resized to the
/// manifest resolution and stacked in declaration order into [C,H,W].
/// `band_spec` optionally selects/reorders bands by tensor name.
inline Dataset load_dataset(const std::filesystem::path& manifest_path,
                            const std::vector<std::string>& band_spec = {}) {
    const Manifest m = parse_manifest(manifest_path);
    Dataset ds;
    ds.channels = m.channels;
    ds.height = m.height;
    ds.width = m.width;
    ds.classes = m.classes;
    ds.task = m.task;
    for (const ManifestRecord& rec : m.records) {
        const std::filesystem::path fp = m.base_dir / rec.path;
        if (!std::filesystem::exists(fp))
            throw DataError("sample file missing: '" + fp.string() + "'");
        const TensorFile tf = TensorFile::read(fp);
        std::vector<const TensorFileEntry*> bands;
        if (band_spec.empty()) {
            for (const TensorFileEntry& e : tf.entries())
                if (e.dtype == kDtypeF32) bands.push_back(&e);
        } else {
            for (const std::string& name : band_spec) {
                const TensorFileEntry* e = tf.find(name);
                if (!e)
                    throw DataError("sample '" + fp.string() + "': band '" + name + "' not found");
                bands.push_back(e);
            }
        }
        if (bands.size() != m.channels)
            throw DataError("sample '" + fp.string() + "': " + std::to_string(bands.size()) +
                            " bands vs manifest channels " + std::to_string(m.channels));
        Sample s;
        s.path = rec.path;
        s.image = Tensor<float>({m.channels, m.height, m.width});
        for (std::size_t c = 0; c < bands.size(); ++c) {
            const Tensor<float> band =
                resize_band(Tensor<float>(bands[c]->shape, bands[c]->f32), m.height, m.width);
            std::copy_n(band.data.data(), band.size(),
                        s.image.data.data() + c * m.height * m.width);
        }
        s.labels = Tensor<float>({m.classes});
        s.label_list = rec.labels;
        std::sort(s.label_list.begin(), s.label_list.end());
        for (std::size_t l : s.label_list) s.labels.data[l] = 1.0f;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

struct SplitFractions {
    double train = 0.70, val = 0.15, test = 0.15;
};

struct DatasetSplits {
    Dataset train, val, test;
};

/// Seeded shuffle, then a contiguous cut. Validation and test get the floor
/// allocation; the remainder goes to train. Partitions are disjoint by
/// sample path and their union is the input.
inline DatasetSplits split_dataset(const Dataset& ds, SplitFractions fractions,
                                   std::uint64_t seed) {
    if (ds.samples.empty()) throw DataError("split_dataset: empty dataset");
    const double sum = fractions.train + fractions.val + fractions.test;
    if (std::abs(sum - 1.0) > 1e-9)
        throw ConfigError("split fractions must sum to 1, got " + std::to_string(sum));
    const std::size_t n = ds.samples.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    const std::size_t n_val = static_cast<std::size_t>(fractions.val * static_cast<double>(n));
    const std::size_t n_test = static_cast<std::size_t>(fractions.test * static_cast<double>(n));
    const std::size_t n_train = n - n_val - n_test;
    DatasetSplits out;
    auto meta = [&](Dataset& d) {
        d.channels = ds.channels;
        d.height = ds.height;
        d.width = ds.width;
        d.classes = ds.classes;
        d.task = ds.task;
    };
    meta(out.train);
    meta(out.val);
    meta(out.test);
    for (std::size_t i = 0; i < n; ++i) {
        const Sample& s = ds.samples[idx[i]];
        if (i < n_train)
            out.train.samples.push_back(s);
        else if (i < n_train + n_val)
            out.val.samples.push_back(s);
        else
            out.test.samples.push_back(s);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic dataset: deterministic class templates (per-band offsets from
// base-3 codes of class+1, plus an exactly zero-mean oriented cosine) under
// N(0, 0.1) noise. Templates of distinct classes keep their per-band mean
// vectors at least 0.5 apart, so classes are provably separable.
// ---------------------------------------------------------------------------

inline double synth_template_value(std::size_t cls, std::size_t band, std::size_t y,
                                   std::size_t x, std::size_t h, std::size_t w) {
    std::size_t code = cls + 1;
    for (std::size_t b = 0; b < band; ++b) code /= 3;
    const double dc = 0.5 * static_cast<double>(code % 3);
    const double freq = static_cast<double>(1 + cls % 4);
    static const int orient[4][2] = {{1, 0}, {0, 1}, {1, 1}, {1, -1}};
    const int ax = orient[cls % 4][0], ay = orient[cls % 4][1];
    const double phase = 6.283185307179586 * std::fmod(static_cast<double>(cls) * 0.618033988749895, 1.0);
    const double arg = 6.283185307179586 * freq *
                           (ax * static_cast<double>(x) / static_cast<double>(w) +
                            ay * static_cast<double>(y) / static_cast<double>(h)) +
                       phase;
    return dc + 0.25 * std::cos(arg);
}

struct SynthSpec {
    std::size_t num_classes = 8;
    std::size_t samples_per_class = 32;
    std::size_t channels = 3;
    std::size_t height = 32;
    std::size_t width = 32;
    Task task = Task::Multiclass;
    std::uint64_t seed = 1;
};

/// Writes `num_classes * samples_per_class` sample containers plus a manifest
/// under `out_dir`; returns the manifest path. Multilabel mode superimposes
/// one to three class templates per sample.
inline std::filesystem::path synthesize_dataset(const SynthSpec& spec,
                                                const std::filesystem::path& out_dir) {
    if (spec.num_classes == 0 || spec.samples_per_class == 0 || spec.channels == 0 ||
        spec.height == 0 || spec.width == 0)
        throw ConfigError("synthesize_dataset: all sizes must be positive");
    std::filesystem::create_directories(out_dir / "samples");
    Rng rng(spec.seed);
    Manifest m;
    m.channels = spec.channels;
    m.height = spec.height;
    m.width = spec.width;
    m.classes = spec.num_classes;
    m.task = spec.task;

    const std::size_t total = spec.num_classes * spec.samples_per_class;
    std::vector<std::size_t> class_pool(spec.num_classes);
    for (std::size_t c = 0; c < spec.num_classes; ++c) class_pool[c] = c;

    for (std::size_t i = 0; i < total; ++i) {
        std::vector<std::size_t> labels;
        if (spec.task == Task::Multiclass) {
            labels = {i / spec.samples_per_class};
        } else {
            std::size_t want = 1 + rng.index(3);
            want = std::min(want, spec.num_classes);
            rng.shuffle(class_pool);
            labels.assign(class_pool.begin(),
                          class_pool.begin() + static_cast<std::ptrdiff_t>(want));
            std::sort(labels.begin(), labels.end());
        }
        TensorFile tf;
        for (std::size_t c = 0; c < spec.channels; ++c) {
            Tensor<float> band({spec.height, spec.width});
            for (std::size_t y = 0; y < spec.height; ++y)
                for (std::size_t x = 0; x < spec.width; ++x) {
                    double v = rng.normal(0.0, 0.1);
                    for (std::size_t cls : labels)
                        v += synth_template_value(cls, c, y, x, spec.height, spec.width);
                    band.at2(y, x) = static_cast<float>(v);
                }
            char name[16];
            std::snprintf(name, sizeof(name), "band%02zu", c);
            tf.add(name, band);
        }
        char fname[40];
        std::snprintf(fname, sizeof(fname), "samples/sample_%05zu.vigt", i);
        tf.write(out_dir / fname);
        m.records.push_back(ManifestRecord{fname, labels});
    }
    const std::filesystem::path manifest_path = out_dir / "manifest.txt";
    write_manifest(m, manifest_path);
    return manifest_path;
}

}  // namespace vig
