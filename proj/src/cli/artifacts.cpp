#include "mergeforge/cli.hpp"

#include <openssl/evp.h>

#include <system_error>

namespace mergeforge::cli {

std::string sha256_hex(const std::vector<uint8_t> & bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int  len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error(Errc::io, "SHA-256 failed");
    }
    static const char * hex = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

std::string sha256_file(const fs::path & path) {
    return sha256_hex(read_file(path));
}

std::string json_text(const nlohmann::ordered_json & j) {
    return j.dump(2) + "\n";
}

Staging::~Staging() {
    if (committed_) {
        return;
    }
    for (const auto & p : written_) {
        std::error_code ec;
        fs::remove(p, ec);
    }
}

void Staging::write(const fs::path & rel, const std::vector<uint8_t> & bytes) {
    const fs::path full = root_ / rel;
    std::error_code ec;
    fs::create_directories(full.parent_path(), ec);
    if (ec) {
        throw Error(Errc::io, "cannot create " + full.parent_path().string() + ": " + ec.message());
    }
    written_.push_back(full);
    write_file(full, bytes);
    records_.push_back({{"path", rel.generic_string()}, {"sha256", sha256_hex(bytes)}});
}

void Staging::write_text(const fs::path & rel, const std::string & text) {
    write(rel, std::vector<uint8_t>(text.begin(), text.end()));
}

void Staging::write_json(const fs::path & rel, const nlohmann::ordered_json & j) {
    write_text(rel, json_text(j));
}

WeightSet join_model(const Model & m) {
    WeightSet out = m.encoder;
    for (const auto & t : m.head) {
        out.add(t);
    }
    return out;
}

Model split_model(const Architecture & arch, const WeightSet & ws) {
    Model m;
    m.encoder = WeightSet(ws.arch_id());
    m.head    = WeightSet(ws.arch_id());
    for (const auto & [name, shape] : arch.encoder_layout()) {
        const Tensor * t = ws.find(name);
        if (!t) {
            throw Error(Errc::shape_mismatch, "model file lacks encoder tensor '" + name + "'");
        }
        m.encoder.add(*t);
    }
    for (const auto & t : ws) {
        if (!m.encoder.contains(t.name)) {
            m.head.add(t);
        }
    }
    arch.check_encoder(m.encoder);
    if (!m.head.empty()) {
        arch.check_head(m.head);
    }
    return m;
}

nlohmann::ordered_json input_record(const fs::path & out_dir, const fs::path & file) {
    std::string shown = file.generic_string();
    std::error_code ec;
    const fs::path  rel = fs::relative(file, out_dir, ec);
    if (!ec && !rel.empty() && rel.begin()->string() != "..") {
        shown = rel.generic_string();
    }
    return {{"path", shown}, {"sha256", sha256_file(file)}};
}

} // namespace mergeforge::cli
