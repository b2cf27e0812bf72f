#include "cwdiff/io/blob.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace cwdiff {

static_assert(std::endian::native == std::endian::little, "blob codec assumes a little-endian host");

namespace {

template <typename U>
void put(std::string& out, U v) {
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.append(buf, sizeof(U));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <typename U>
    U get() {
        U v;
        std::memcpy(&v, take(sizeof(U)), sizeof(U));
        return v;
    }

    const char* take(std::size_t n) {
        require(pos_ + n <= bytes_.size(), ErrorKind::io, "blob truncated");
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string encode_blob(const std::vector<NamedTensor>& tensors) {
    std::string out(kBlobMagic);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const NamedTensor& t : tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rank()));
        for (std::size_t d : t.value.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        out.append(reinterpret_cast<const char*>(t.value.data()), t.value.numel() * sizeof(float));
    }
    return out;
}

std::vector<NamedTensor> decode_blob(std::string_view bytes) {
    Reader r(bytes);
    require(std::string_view(r.take(kBlobMagic.size()), kBlobMagic.size()) == kBlobMagic, ErrorKind::io,
            "blob has wrong magic");
    const auto count = r.get<std::uint32_t>();
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const auto len = r.get<std::uint32_t>();
        t.name.assign(r.take(len), len);
        const auto rank = r.get<std::uint32_t>();
        require(rank <= 8, ErrorKind::io, "blob tensor '" + t.name + "' has implausible rank");
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint32_t>());
        std::vector<float> data(shape_numel(shape));
        std::memcpy(data.data(), r.take(data.size() * sizeof(float)), data.size() * sizeof(float));
        t.value = TensorF(std::move(shape), std::move(data));
        out.push_back(std::move(t));
    }
    require(r.done(), ErrorKind::io, "trailing bytes after blob payload");
    return out;
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    require(EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) == 1, ErrorKind::io,
            "SHA-256 computation failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorKind::io, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        require(static_cast<bool>(out), ErrorKind::io, "short write to " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        fail(ErrorKind::io, "cannot move " + tmp.string() + " into place: " + ec.message());
    }
}

}  // namespace cwdiff
