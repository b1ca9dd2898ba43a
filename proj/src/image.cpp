#include "kdx/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "kdx/errors.hpp"

namespace kdx {

namespace {

constexpr uint8_t kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>(v & 0xff));
}

uint32_t read_u32_be(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4], const uint8_t* data, size_t n) {
    put_u32_be(out, static_cast<uint32_t>(n));
    size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data, data + n);
    uint32_t crc = static_cast<uint32_t>(
        ::crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start)));
    put_u32_be(out, crc);
}

uint8_t color_type_for(size_t channels) {
    switch (channels) {
        case 1: return 0;
        case 2: return 4;
        case 3: return 2;
        case 4: return 6;
    }
    throw DomainError("png encoder supports 1-4 channels, got " + std::to_string(channels));
}

size_t channels_for(uint8_t color_type) {
    switch (color_type) {
        case 0: return 1;
        case 2: return 3;
        case 4: return 2;
        case 6: return 4;
    }
    throw ParseError(ParseFault::Unsupported,
                     "unsupported png color type " + std::to_string(color_type));
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

std::vector<uint8_t> encode_png(const Image& image) {
    if (image.width == 0 || image.height == 0) throw DomainError("cannot encode an empty image");
    if (image.pixels.size() != image.width * image.height * image.channels) {
        throw ShapeError("image pixel buffer does not match its dimensions");
    }

    // Raw stream: one filter byte (0 = None) per scanline.
    const size_t row = image.width * image.channels;
    std::vector<uint8_t> raw((row + 1) * image.height);
    for (size_t y = 0; y < image.height; ++y) {
        raw[y * (row + 1)] = 0;
        std::memcpy(&raw[y * (row + 1) + 1], &image.pixels[y * row], row);
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (::compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) !=
        Z_OK) {
        throw IoError("png deflate failed");
    }
    compressed.resize(bound);

    std::vector<uint8_t> out(kPngSignature, kPngSignature + 8);
    uint8_t ihdr[13];
    ihdr[0] = static_cast<uint8_t>((image.width >> 24) & 0xff);
    ihdr[1] = static_cast<uint8_t>((image.width >> 16) & 0xff);
    ihdr[2] = static_cast<uint8_t>((image.width >> 8) & 0xff);
    ihdr[3] = static_cast<uint8_t>(image.width & 0xff);
    ihdr[4] = static_cast<uint8_t>((image.height >> 24) & 0xff);
    ihdr[5] = static_cast<uint8_t>((image.height >> 16) & 0xff);
    ihdr[6] = static_cast<uint8_t>((image.height >> 8) & 0xff);
    ihdr[7] = static_cast<uint8_t>(image.height & 0xff);
    ihdr[8] = 8;  // bit depth
    ihdr[9] = color_type_for(image.channels);
    ihdr[10] = 0;  // compression
    ihdr[11] = 0;  // filter method
    ihdr[12] = 0;  // no interlace
    append_chunk(out, "IHDR", ihdr, 13);
    append_chunk(out, "IDAT", compressed.data(), compressed.size());
    append_chunk(out, "IEND", nullptr, 0);
    return out;
}

Image decode_png(const uint8_t* data, size_t size) {
    if (size < 8 || std::memcmp(data, kPngSignature, 8) != 0) {
        throw ParseError(ParseFault::BadMagic, "not a png file");
    }

    size_t pos = 8;
    bool have_ihdr = false, have_iend = false;
    uint32_t width = 0, height = 0;
    size_t channels = 0;
    std::vector<uint8_t> idat;

    while (pos < size) {
        if (pos + 8 > size) throw ParseError(ParseFault::Truncated, "png chunk header truncated");
        uint32_t len = read_u32_be(data + pos);
        const char* type = reinterpret_cast<const char*>(data + pos + 4);
        if (pos + 12 + static_cast<size_t>(len) > size) {
            throw ParseError(ParseFault::Truncated, "png chunk payload truncated");
        }
        const uint8_t* payload = data + pos + 8;
        uint32_t stored_crc = read_u32_be(payload + len);
        uint32_t actual_crc = static_cast<uint32_t>(
            ::crc32(0L, data + pos + 4, static_cast<uInt>(len + 4)));
        if (stored_crc != actual_crc) {
            throw ParseError(ParseFault::Checksum, "png chunk crc mismatch");
        }

        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw ParseError(ParseFault::Malformed, "png IHDR length must be 13");
            width = read_u32_be(payload);
            height = read_u32_be(payload + 4);
            uint8_t bit_depth = payload[8];
            uint8_t color_type = payload[9];
            uint8_t interlace = payload[12];
            if (bit_depth != 8) {
                throw ParseError(ParseFault::Unsupported,
                                 "only 8-bit png supported, got depth " + std::to_string(bit_depth));
            }
            channels = channels_for(color_type);
            if (interlace != 0) {
                throw ParseError(ParseFault::Unsupported, "interlaced png not supported");
            }
            if (width == 0 || height == 0) {
                throw ParseError(ParseFault::Malformed, "png has zero dimension");
            }
            have_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            if (!have_ihdr) throw ParseError(ParseFault::Malformed, "png IDAT before IHDR");
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            have_iend = true;
            pos += 12 + len;
            break;
        } else if (std::memcmp(type, "PLTE", 4) == 0) {
            throw ParseError(ParseFault::Unsupported, "palette png not supported");
        }
        // Ancillary chunks are skipped.
        pos += 12 + static_cast<size_t>(len);
    }
    if (!have_ihdr) throw ParseError(ParseFault::Malformed, "png missing IHDR");
    if (!have_iend) throw ParseError(ParseFault::Truncated, "png missing IEND");
    if (idat.empty()) throw ParseError(ParseFault::Malformed, "png missing IDAT");

    const size_t row = static_cast<size_t>(width) * channels;
    const size_t raw_size = (row + 1) * height;
    std::vector<uint8_t> raw(raw_size);
    uLongf got = static_cast<uLongf>(raw_size);
    int rc = ::uncompress(raw.data(), &got, idat.data(), static_cast<uLong>(idat.size()));
    if (rc != Z_OK || got != raw_size) {
        throw ParseError(ParseFault::Malformed, "png pixel data does not inflate to expected size");
    }

    Image image(width, height, channels);
    std::vector<uint8_t> prev(row, 0);
    for (size_t y = 0; y < height; ++y) {
        uint8_t filter = raw[y * (row + 1)];
        const uint8_t* src = &raw[y * (row + 1) + 1];
        uint8_t* dst = &image.pixels[y * row];
        switch (filter) {
            case 0:
                std::memcpy(dst, src, row);
                break;
            case 1:  // Sub
                for (size_t i = 0; i < row; ++i) {
                    uint8_t left = i >= channels ? dst[i - channels] : 0;
                    dst[i] = static_cast<uint8_t>(src[i] + left);
                }
                break;
            case 2:  // Up
                for (size_t i = 0; i < row; ++i) dst[i] = static_cast<uint8_t>(src[i] + prev[i]);
                break;
            case 3:  // Average
                for (size_t i = 0; i < row; ++i) {
                    int left = i >= channels ? dst[i - channels] : 0;
                    dst[i] = static_cast<uint8_t>(src[i] + (left + prev[i]) / 2);
                }
                break;
            case 4:  // Paeth
                for (size_t i = 0; i < row; ++i) {
                    int left = i >= channels ? dst[i - channels] : 0;
                    int upleft = i >= channels ? prev[i - channels] : 0;
                    dst[i] = static_cast<uint8_t>(src[i] + paeth(left, prev[i], upleft));
                }
                break;
            default:
                throw ParseError(ParseFault::Malformed,
                                 "png filter type " + std::to_string(filter) + " is invalid");
        }
        std::memcpy(prev.data(), dst, row);
    }
    return image;
}

void write_png(const Image& image, const std::filesystem::path& path) {
    std::vector<uint8_t> bytes = encode_png(image);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

Image read_png(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for reading");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_png(bytes.data(), bytes.size());
    } catch (const ParseError& e) {
        throw ParseError(e.fault, path.string() + ": " + e.what());
    }
}

Tensor image_to_tensor(const Image& image, size_t target_channels) {
    if (target_channels != 1 && target_channels != 3) {
        throw DomainError("target_channels must be 1 or 3");
    }
    const size_t color_channels = image.channels >= 3 ? 3 : 1;  // alpha dropped
    Tensor t({target_channels, image.height, image.width});
    for (size_t y = 0; y < image.height; ++y) {
        for (size_t x = 0; x < image.width; ++x) {
            double rgb[3];
            for (size_t c = 0; c < color_channels; ++c) rgb[c] = image.at(y, x, c) / 255.0;
            if (target_channels == 1) {
                double v = 0.0;
                for (size_t c = 0; c < color_channels; ++c) v += rgb[c];
                t.at(0, y, x) = v / static_cast<double>(color_channels);
            } else {
                for (size_t c = 0; c < 3; ++c) {
                    t.at(c, y, x) = rgb[color_channels == 1 ? 0 : c];
                }
            }
        }
    }
    return t;
}

Image tensor_to_image(const Tensor& chw) {
    if (chw.rank() != 3 || (chw.shape[0] != 1 && chw.shape[0] != 3)) {
        throw ShapeError("tensor_to_image expects [1,H,W] or [3,H,W], got " + shape_str(chw.shape));
    }
    Image image(chw.shape[2], chw.shape[1], chw.shape[0]);
    for (size_t c = 0; c < chw.shape[0]; ++c) {
        for (size_t y = 0; y < chw.shape[1]; ++y) {
            for (size_t x = 0; x < chw.shape[2]; ++x) {
                double v = std::clamp(chw.at(c, y, x), 0.0, 1.0);
                image.at(y, x, c) = static_cast<uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    return image;
}

Tensor resize_bilinear(const Tensor& t, size_t out_h, size_t out_w) {
    if (out_h == 0 || out_w == 0) throw ShapeError("resize target must be positive");
    const bool flat = t.rank() == 2;
    if (t.rank() != 2 && t.rank() != 3) {
        throw ShapeError("resize_bilinear expects rank 2 or 3, got " + shape_str(t.shape));
    }
    const size_t c = flat ? 1 : t.shape[0];
    const size_t in_h = flat ? t.shape[0] : t.shape[1];
    const size_t in_w = flat ? t.shape[1] : t.shape[2];

    const double sy = out_h > 1 ? static_cast<double>(in_h - 1) / static_cast<double>(out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(in_w - 1) / static_cast<double>(out_w - 1) : 0.0;

    Tensor out(flat ? std::vector<size_t>{out_h, out_w} : std::vector<size_t>{c, out_h, out_w});
    for (size_t ch = 0; ch < c; ++ch) {
        const double* src = &t.data[ch * in_h * in_w];
        double* dst = &out.data[ch * out_h * out_w];
        for (size_t y = 0; y < out_h; ++y) {
            const double fy = sy * static_cast<double>(y);
            const size_t y0 = static_cast<size_t>(fy);
            const size_t y1 = std::min(y0 + 1, in_h - 1);
            const double wy = fy - static_cast<double>(y0);
            for (size_t x = 0; x < out_w; ++x) {
                const double fx = sx * static_cast<double>(x);
                const size_t x0 = static_cast<size_t>(fx);
                const size_t x1 = std::min(x0 + 1, in_w - 1);
                const double wx = fx - static_cast<double>(x0);
                const double top = (1.0 - wx) * src[y0 * in_w + x0] + wx * src[y0 * in_w + x1];
                const double bot = (1.0 - wx) * src[y1 * in_w + x0] + wx * src[y1 * in_w + x1];
                dst[y * out_w + x] = (1.0 - wy) * top + wy * bot;
            }
        }
    }
    return out;
}

}  // namespace kdx
