#include "mergeforge/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace mergeforge {

int64_t shape_numel(const Shape & shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape & shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::string name_, Shape shape_)
    : name(std::move(name_)), shape(std::move(shape_)), data(static_cast<size_t>(shape_numel(shape)), 0.0f) {}

Tensor::Tensor(std::string name_, Shape shape_, std::vector<float> data_)
    : name(std::move(name_)), shape(std::move(shape_)), data(std::move(data_)) {
    if (shape.empty() || static_cast<int64_t>(data.size()) != shape_numel(shape)) {
        throw Error(Errc::shape_mismatch, "tensor '" + name + "' shape " + shape_str(shape) + " does not match " +
                                              std::to_string(data.size()) + " elements");
    }
}

void WeightSet::add(Tensor t) {
    if (t.shape.empty()) {
        throw Error(Errc::shape_mismatch, "tensor '" + t.name + "' has an empty shape");
    }
    for (int64_t d : t.shape) {
        if (d <= 0) {
            throw Error(Errc::shape_mismatch, "tensor '" + t.name + "' has non-positive dim " + shape_str(t.shape));
        }
    }
    if (t.numel() != shape_numel(t.shape)) {
        throw Error(Errc::shape_mismatch, "tensor '" + t.name + "' payload does not match shape");
    }
    if (index_.count(t.name)) {
        throw Error(Errc::invalid_argument, "duplicate tensor name '" + t.name + "'");
    }
    index_.emplace(t.name, tensors_.size());
    tensors_.push_back(std::move(t));
}

bool WeightSet::contains(std::string_view name) const {
    return find(name) != nullptr;
}

const Tensor * WeightSet::find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &tensors_[it->second];
}

Tensor * WeightSet::find(std::string_view name) {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &tensors_[it->second];
}

const Tensor & WeightSet::at(std::string_view name) const {
    if (const Tensor * t = find(name)) {
        return *t;
    }
    throw Error(Errc::incompatible, "missing tensor '" + std::string(name) + "'");
}

Tensor & WeightSet::at(std::string_view name) {
    if (Tensor * t = find(name)) {
        return *t;
    }
    throw Error(Errc::incompatible, "missing tensor '" + std::string(name) + "'");
}

int64_t WeightSet::numel() const {
    int64_t n = 0;
    for (const auto & t : tensors_) {
        n += t.numel();
    }
    return n;
}

bool WeightSet::identical(const WeightSet & other) const {
    if (arch_id_ != other.arch_id_ || tensors_.size() != other.tensors_.size()) {
        return false;
    }
    for (size_t i = 0; i < tensors_.size(); ++i) {
        const Tensor & a = tensors_[i];
        const Tensor & b = other.tensors_[i];
        if (a.name != b.name || a.shape != b.shape ||
            std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) != 0) {
            return false;
        }
    }
    return true;
}

namespace {

std::string first_mismatch(const WeightSet & a, const WeightSet & b) {
    const size_t n = std::max(a.size(), b.size());
    for (size_t i = 0; i < n; ++i) {
        if (i >= a.size()) {
            return "tensor '" + b[i].name + "' present only in the second set";
        }
        if (i >= b.size()) {
            return "tensor '" + a[i].name + "' present only in the first set";
        }
        if (a[i].name != b[i].name) {
            return "tensor '" + a[i].name + "' vs '" + b[i].name + "' at position " + std::to_string(i);
        }
        if (a[i].shape != b[i].shape) {
            return "tensor '" + a[i].name + "' shape " + shape_str(a[i].shape) + " vs " + shape_str(b[i].shape);
        }
    }
    return {};
}

template <class Fn>
WeightSet zip_map(const WeightSet & a, const WeightSet & b, Fn fn) {
    check_compatible(a, b);
    WeightSet out(a.arch_id());
    for (size_t i = 0; i < a.size(); ++i) {
        Tensor t(a[i].name, a[i].shape);
        const float * pa = a[i].data.data();
        const float * pb = b[i].data.data();
        for (size_t j = 0; j < t.data.size(); ++j) {
            t.data[j] = fn(pa[j], pb[j]);
        }
        out.add(std::move(t));
    }
    return out;
}

} // namespace

void check_compatible(const WeightSet & a, const WeightSet & b) {
    if (std::string m = first_mismatch(a, b); !m.empty()) {
        throw Error(Errc::incompatible, m);
    }
    if (a.arch_id() != b.arch_id()) {
        warn("arch_id mismatch ('" + a.arch_id() + "' vs '" + b.arch_id() + "'); shapes agree, continuing");
    }
}

bool compatible(const WeightSet & a, const WeightSet & b) {
    return first_mismatch(a, b).empty() && a.arch_id() == b.arch_id();
}

WeightSet zeros_like(const WeightSet & ws) {
    WeightSet out(ws.arch_id());
    for (const auto & t : ws) {
        out.add(Tensor(t.name, t.shape));
    }
    return out;
}

WeightSet axpy(const WeightSet & ws, const WeightSet & other, double a) {
    const float af = static_cast<float>(a);
    return zip_map(ws, other, [af](float x, float y) { return x + af * y; });
}

WeightSet lerp(const WeightSet & a, const WeightSet & b, double alpha) {
    const double wb = 1.0 - alpha;
    return zip_map(a, b, [alpha, wb](float x, float y) {
        return static_cast<float>(alpha * static_cast<double>(x) + wb * static_cast<double>(y));
    });
}

WeightSet scaled(const WeightSet & ws, double s) {
    WeightSet out = ws;
    const float sf = static_cast<float>(s);
    for (auto & t : out) {
        for (float & v : t.data) {
            v *= sf;
        }
    }
    return out;
}

double weight_norm(const WeightSet & ws) {
    double acc = 0.0;
    for (const auto & t : ws) {
        for (float v : t.data) {
            acc += static_cast<double>(v) * v;
        }
    }
    return std::sqrt(acc);
}

double weight_distance(const WeightSet & a, const WeightSet & b) {
    check_compatible(a, b);
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const auto & x = a[i].data;
        const auto & y = b[i].data;
        for (size_t j = 0; j < x.size(); ++j) {
            const double d = static_cast<double>(x[j]) - static_cast<double>(y[j]);
            acc += d * d;
        }
    }
    return std::sqrt(acc);
}

// --- container ----------------------------------------------------------------

namespace {

constexpr size_t kAlign = 8;

size_t align_up(size_t n) {
    return (n + kAlign - 1) / kAlign * kAlign;
}

void put_u64(std::vector<uint8_t> & out, uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
}

uint64_t get_u64(const uint8_t * p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<uint64_t>(p[i]) << (8 * i);
    }
    return v;
}

} // namespace

std::vector<uint8_t> encode_container(std::string_view magic, const Container & c) {
    if (magic.size() != 8) {
        throw Error(Errc::invalid_argument, "container magic must be 8 bytes");
    }
    nlohmann::ordered_json header;
    header["arch_id"] = c.arch_id;
    nlohmann::ordered_json list = nlohmann::ordered_json::array();
    size_t offset = 0;
    for (const auto & e : c.entries) {
        nlohmann::ordered_json j;
        j["name"]   = e.name;
        j["dtype"]  = e.dtype;
        j["shape"]  = e.shape;
        j["offset"] = offset;
        j["nbytes"] = e.bytes.size();
        list.push_back(std::move(j));
        offset = align_up(offset + e.bytes.size());
    }
    header["tensors"] = std::move(list);
    if (!c.meta.is_null()) {
        header["meta"] = c.meta;
    }
    const std::string text = header.dump();

    std::vector<uint8_t> out;
    out.reserve(16 + text.size() + offset);
    out.insert(out.end(), magic.begin(), magic.end());
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    const size_t payload_start = out.size();
    for (const auto & e : c.entries) {
        out.insert(out.end(), e.bytes.begin(), e.bytes.end());
        out.resize(payload_start + align_up(out.size() - payload_start), 0);
    }
    return out;
}

Container decode_container(std::string_view magic, const std::vector<uint8_t> & bytes, const std::string & origin,
                           const std::function<int64_t(const ContainerEntry &)> & expected_nbytes) {
    auto bad = [&](Errc code, const std::string & msg) { return Error(code, origin + ": " + msg); };
    if (bytes.size() < 16 || std::memcmp(bytes.data(), magic.data(), 8) != 0) {
        throw bad(Errc::malformed_header, "bad magic (expected " + std::string(magic) + ")");
    }
    const uint64_t header_len = get_u64(bytes.data() + 8);
    if (header_len > bytes.size() - 16) {
        throw bad(Errc::malformed_header, "header length " + std::to_string(header_len) + " exceeds file size");
    }
    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(header_len));
    } catch (const nlohmann::json::exception & e) {
        throw bad(Errc::malformed_header, std::string("header is not valid JSON: ") + e.what());
    }
    const size_t payload_start = 16 + header_len;
    const size_t payload_size  = bytes.size() - payload_start;

    Container c;
    uint64_t  payload_end = 0;
    try {
        if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array()) {
            throw bad(Errc::malformed_header, "header lacks a 'tensors' list");
        }
        c.arch_id = header.value("arch_id", std::string{});
        if (header.contains("meta")) {
            c.meta = header["meta"];
        }
        for (const auto & j : header["tensors"]) {
            ContainerEntry e;
            e.name  = j.at("name").get<std::string>();
            e.dtype = j.at("dtype").get<std::string>();
            e.shape = j.at("shape").get<Shape>();
            const auto offset = j.at("offset").get<uint64_t>();
            const auto nbytes = j.at("nbytes").get<uint64_t>();
            if (e.shape.empty()) {
                throw bad(Errc::malformed_header, "tensor '" + e.name + "' has an empty shape");
            }
            for (int64_t d : e.shape) {
                if (d <= 0) {
                    throw bad(Errc::malformed_header, "tensor '" + e.name + "' has non-positive dim");
                }
            }
            if (offset % kAlign != 0) {
                throw bad(Errc::malformed_header, "tensor '" + e.name + "' offset not 8-byte aligned");
            }
            const int64_t want = expected_nbytes(e);  // throws on unsupported dtype
            if (want != static_cast<int64_t>(nbytes)) {
                throw bad(Errc::payload_length, "tensor '" + e.name + "' declares " + std::to_string(nbytes) +
                                                    " bytes, shape " + shape_str(e.shape) + " needs " +
                                                    std::to_string(want));
            }
            if (offset > payload_size || nbytes > payload_size - offset) {
                throw bad(Errc::payload_length, "tensor '" + e.name + "' runs past end of payload (" +
                                                    std::to_string(payload_size) + " bytes)");
            }
            const auto * p = bytes.data() + payload_start + offset;
            e.bytes.assign(p, p + nbytes);
            payload_end = std::max<uint64_t>(payload_end, align_up(offset + nbytes));
            c.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception & e) {
        throw bad(Errc::malformed_header, std::string("bad tensor record: ") + e.what());
    }
    if (payload_end != payload_size) {
        throw bad(Errc::payload_length, "payload is " + std::to_string(payload_size) + " bytes, tensors need " +
                                            std::to_string(payload_end));
    }
    return c;
}

std::vector<uint8_t> read_file(const std::filesystem::path & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(Errc::io, "cannot open '" + path.string() + "' for reading");
    }
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        throw Error(Errc::io, "read failed on '" + path.string() + "'");
    }
    return bytes;
}

void write_file(const std::filesystem::path & path, const std::vector<uint8_t> & bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(Errc::io, "cannot open '" + path.string() + "' for writing");
    }
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
        throw Error(Errc::io, "write failed on '" + path.string() + "'");
    }
}

std::vector<uint8_t> encode_weights(const WeightSet & ws) {
    Container c;
    c.arch_id = ws.arch_id();
    c.entries.reserve(ws.size());
    for (const auto & t : ws) {
        ContainerEntry e;
        e.name  = t.name;
        e.dtype = "f32";
        e.shape = t.shape;
        e.bytes.resize(t.data.size() * sizeof(float));
        std::memcpy(e.bytes.data(), t.data.data(), e.bytes.size());
        c.entries.push_back(std::move(e));
    }
    return encode_container(kWeightsMagic, c);
}

WeightSet decode_weights(const std::vector<uint8_t> & bytes, const std::string & origin) {
    Container c = decode_container(kWeightsMagic, bytes, origin, [&](const ContainerEntry & e) -> int64_t {
        if (e.dtype != "f32") {
            throw Error(Errc::unsupported_dtype, origin + ": tensor '" + e.name + "' has dtype '" + e.dtype + "'");
        }
        return shape_numel(e.shape) * static_cast<int64_t>(sizeof(float));
    });
    WeightSet ws(c.arch_id);
    for (auto & e : c.entries) {
        Tensor t(e.name, e.shape);
        std::memcpy(t.data.data(), e.bytes.data(), e.bytes.size());
        ws.add(std::move(t));
    }
    return ws;
}

void save_weights(const WeightSet & ws, const std::filesystem::path & path) {
    write_file(path, encode_weights(ws));
}

WeightSet load_weights(const std::filesystem::path & path) {
    return decode_weights(read_file(path), path.string());
}

} // namespace mergeforge
