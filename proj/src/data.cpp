#include "ibcaps/data.hpp"

#include <cstring>
#include <fstream>

namespace ibcaps {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open file: " + path);
    f.seekg(0, std::ios::end);
    const auto n = f.tellg();
    f.seekg(0);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(n));
    f.read(reinterpret_cast<char*>(bytes.data()), n);
    if (!f) throw ParseError("short read: " + path);
    return bytes;
}

std::uint32_t be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
           (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

std::uint32_t le32(const std::uint8_t* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}

std::uint16_t le16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(std::uint16_t(p[0]) | (std::uint16_t(p[1]) << 8));
}

}  // namespace

void Dataset::validate() const {
    if (size() <= 0) throw ParseError("dataset '" + name + "' is empty");
    if (static_cast<std::int64_t>(images.size()) != size() * sample_bytes())
        throw ParseError("dataset '" + name + "': image payload size mismatch");
    for (std::uint8_t y : labels)
        if (y >= num_classes)
            throw ParseError("dataset '" + name + "': label " + std::to_string(int(y)) +
                             " >= num_classes " + std::to_string(num_classes));
}

Tensor Dataset::image_real(std::int64_t i) const {
    const std::int64_t sb = sample_bytes();
    Tensor t({channels, height, width});
    const std::uint8_t* src = images.data() + i * sb;
    for (std::int64_t j = 0; j < sb; ++j) t[j] = static_cast<real>(src[j]) / real(255);
    return t;
}

Dataset Dataset::take(std::int64_t n) const {
    if (n >= size()) return *this;
    Dataset d = *this;
    d.labels.assign(labels.begin(), labels.begin() + n);
    d.images.assign(images.begin(), images.begin() + n * sample_bytes());
    return d;
}

IdxData parse_idx(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    if (bytes.size() < 4) throw ParseError(origin + ": truncated header");
    const std::uint32_t magic = be32(bytes.data());
    int rank;
    if (magic == 0x00000803u) rank = 3;
    else if (magic == 0x00000801u) rank = 1;
    else if ((magic & 0xffff0000u) == 0 && (magic & 0xff00u) != 0x0800u)
        throw ParseError(origin + ": unsupported IDX dtype code " + std::to_string((magic >> 8) & 0xff));
    else
        throw ParseError(origin + ": bad IDX magic " + std::to_string(magic));
    if (bytes.size() < 4u + 4u * static_cast<std::size_t>(rank))
        throw ParseError(origin + ": truncated dim header");
    IdxData out;
    std::int64_t n = 1;
    for (int i = 0; i < rank; ++i) {
        const std::uint32_t d = be32(bytes.data() + 4 + 4 * i);
        out.dims.push_back(static_cast<int>(d));
        n *= d;
    }
    const std::size_t expect = 4 + 4 * static_cast<std::size_t>(rank) + static_cast<std::size_t>(n);
    if (bytes.size() != expect)
        throw ParseError(origin + ": payload length mismatch, expected " + std::to_string(expect) +
                         " bytes, got " + std::to_string(bytes.size()));
    out.data.assign(bytes.begin() + 4 + 4 * rank, bytes.end());
    return out;
}

IdxData parse_idx_file(const std::string& path) { return parse_idx(read_file(path), path); }

Dataset load_idx_dataset(const std::string& dir, bool train, const std::string& name,
                         int num_classes) {
    const std::string stem = train ? "train" : "t10k";
    IdxData imgs = parse_idx_file(dir + "/" + stem + "-images-idx3-ubyte");
    IdxData lbls = parse_idx_file(dir + "/" + stem + "-labels-idx1-ubyte");
    if (imgs.dims.size() != 3) throw ParseError(dir + ": images file is not rank-3");
    if (lbls.dims.size() != 1 || lbls.dims[0] != imgs.dims[0])
        throw ParseError(dir + ": image/label count mismatch");
    Dataset ds;
    ds.name = name;
    ds.num_classes = num_classes;
    ds.channels = 1;
    ds.height = imgs.dims[1];
    ds.width = imgs.dims[2];
    ds.images = std::move(imgs.data);
    ds.labels = std::move(lbls.data);
    ds.validate();
    return ds;
}

Dataset parse_cifar10_binary(const std::vector<std::string>& paths) {
    constexpr std::int64_t kRecord = 3073;
    Dataset ds;
    ds.name = "cifar10";
    ds.num_classes = 10;
    ds.channels = 3;
    ds.height = 32;
    ds.width = 32;
    for (const auto& path : paths) {
        const auto bytes = read_file(path);
        if (bytes.empty() || bytes.size() % kRecord != 0)
            throw ParseError(path + ": size " + std::to_string(bytes.size()) +
                             " is not a multiple of the 3073-byte record");
        const std::int64_t n = static_cast<std::int64_t>(bytes.size()) / kRecord;
        for (std::int64_t r = 0; r < n; ++r) {
            const std::uint8_t* rec = bytes.data() + r * kRecord;
            if (rec[0] >= 10)
                throw ParseError(path + ": record " + std::to_string(r) + " has label " +
                                 std::to_string(int(rec[0])) + " >= 10");
            ds.labels.push_back(rec[0]);
            ds.images.insert(ds.images.end(), rec + 1, rec + kRecord);
        }
    }
    ds.validate();
    return ds;
}

static constexpr char kIbdsMagic[4] = {'I', 'B', 'D', 'S'};
static constexpr std::uint32_t kIbdsVersion = 1;

Dataset parse_raw_container_bytes(const std::vector<std::uint8_t>& bytes,
                                  const std::string& origin) {
    constexpr std::size_t kHeader = 4 + 4 + 4 + 1 + 2 + 2 + 1;
    if (bytes.size() < kHeader) throw ParseError(origin + ": truncated header");
    if (std::memcmp(bytes.data(), kIbdsMagic, 4) != 0)
        throw ParseError(origin + ": bad magic (expected IBDS)");
    const std::uint32_t version = le32(bytes.data() + 4);
    if (version != kIbdsVersion)
        throw ParseError(origin + ": unsupported IBDS version " + std::to_string(version));
    Dataset ds;
    const std::uint32_t n = le32(bytes.data() + 8);
    ds.channels = bytes[12];
    ds.height = le16(bytes.data() + 13);
    ds.width = le16(bytes.data() + 15);
    ds.num_classes = bytes[17];
    ds.name = "ibds";
    const std::size_t expect =
        kHeader + static_cast<std::size_t>(n) * static_cast<std::size_t>(ds.sample_bytes()) + n;
    if (bytes.size() != expect)
        throw ParseError(origin + ": length mismatch at byte offset " +
                         std::to_string(std::min(bytes.size(), expect)) + " (expected " +
                         std::to_string(expect) + " bytes total, got " +
                         std::to_string(bytes.size()) + ")");
    const std::size_t ib = static_cast<std::size_t>(n) * static_cast<std::size_t>(ds.sample_bytes());
    ds.images.assign(bytes.begin() + kHeader, bytes.begin() + kHeader + ib);
    ds.labels.assign(bytes.begin() + kHeader + ib, bytes.end());
    ds.validate();
    return ds;
}

Dataset parse_raw_container(const std::string& path) {
    return parse_raw_container_bytes(read_file(path), path);
}

std::vector<std::uint8_t> write_raw_container(const Dataset& ds) {
    ds.validate();
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kIbdsMagic, kIbdsMagic + 4);
    auto push32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    };
    push32(kIbdsVersion);
    push32(static_cast<std::uint32_t>(ds.size()));
    out.push_back(static_cast<std::uint8_t>(ds.channels));
    out.push_back(static_cast<std::uint8_t>(ds.height & 0xff));
    out.push_back(static_cast<std::uint8_t>(ds.height >> 8));
    out.push_back(static_cast<std::uint8_t>(ds.width & 0xff));
    out.push_back(static_cast<std::uint8_t>(ds.width >> 8));
    out.push_back(static_cast<std::uint8_t>(ds.num_classes));
    out.insert(out.end(), ds.images.begin(), ds.images.end());
    out.insert(out.end(), ds.labels.begin(), ds.labels.end());
    return out;
}

void write_raw_container_file(const Dataset& ds, const std::string& path) {
    const auto bytes = write_raw_container(ds);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

Tensor to_unit_interval(const std::vector<std::uint8_t>& bytes, std::vector<int> shape) {
    Tensor t(std::move(shape));
    if (t.numel() != static_cast<std::int64_t>(bytes.size()))
        throw std::invalid_argument("to_unit_interval: shape/payload mismatch");
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<real>(bytes[i]) / real(255);
    return t;
}

Dataset load_dataset(const std::string& data_dir, const std::string& dataset, bool train) {
    if (dataset == "mnist" || dataset == "fashion")
        return load_idx_dataset(data_dir + "/" + dataset, train, dataset);
    if (dataset == "cifar10") {
        std::vector<std::string> paths;
        if (train)
            for (int i = 1; i <= 5; ++i)
                paths.push_back(data_dir + "/cifar10/data_batch_" + std::to_string(i) + ".bin");
        else
            paths.push_back(data_dir + "/cifar10/test_batch.bin");
        return parse_cifar10_binary(paths);
    }
    if (dataset == "svhn") {
        Dataset ds = parse_raw_container(data_dir + "/svhn/" +
                                         std::string(train ? "train" : "test") + ".ibds");
        ds.name = "svhn";
        return ds;
    }
    throw std::invalid_argument("unknown dataset: " + dataset);
}

BatchIterator::BatchIterator(const Dataset& ds, int batch_size, std::uint64_t shuffle_seed,
                             bool shuffle, bool drop_last)
    : ds_(ds), batch_size_(batch_size), drop_last_(drop_last) {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    order_.resize(static_cast<std::size_t>(ds.size()));
    for (std::int64_t i = 0; i < ds.size(); ++i) order_[static_cast<std::size_t>(i)] = i;
    if (shuffle) {
        Rng rng(shuffle_seed, 0x5u);
        rng.shuffle(order_);
    }
}

int BatchIterator::num_batches() const {
    const std::int64_t n = static_cast<std::int64_t>(order_.size());
    return static_cast<int>(drop_last_ ? n / batch_size_ : (n + batch_size_ - 1) / batch_size_);
}

void BatchIterator::reset() { pos_ = 0; }

bool BatchIterator::next(Batch& out) {
    const std::int64_t n = static_cast<std::int64_t>(order_.size());
    if (pos_ >= n) return false;
    std::int64_t take = std::min<std::int64_t>(batch_size_, n - pos_);
    if (drop_last_ && take < batch_size_) return false;
    const std::int64_t sb = ds_.sample_bytes();
    out.images = Tensor({static_cast<int>(take), ds_.channels, ds_.height, ds_.width});
    out.labels.resize(static_cast<std::size_t>(take));
    out.indices.resize(static_cast<std::size_t>(take));
    for (std::int64_t b = 0; b < take; ++b) {
        const std::int64_t i = order_[static_cast<std::size_t>(pos_ + b)];
        out.indices[static_cast<std::size_t>(b)] = i;
        out.labels[static_cast<std::size_t>(b)] = ds_.labels[static_cast<std::size_t>(i)];
        const std::uint8_t* src = ds_.images.data() + i * sb;
        real* dst = out.images.ptr() + b * sb;
        for (std::int64_t j = 0; j < sb; ++j) dst[j] = static_cast<real>(src[j]) / real(255);
    }
    pos_ += take;
    return true;
}

std::vector<real> one_hot(const std::vector<int>& labels, int num_classes) {
    std::vector<real> out(labels.size() * static_cast<std::size_t>(num_classes), real(0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw std::invalid_argument("one_hot: label out of range");
        out[i * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(labels[i])] =
            real(1);
    }
    return out;
}

}  // namespace ibcaps
