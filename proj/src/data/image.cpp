#include <algorithm>
#include <cmath>
#include <fstream>

#include "keepfit/data.hpp"

namespace keepfit::data {

void write_ppm(const std::filesystem::path& path, const Image& image) {
    if (image.channels != 3) throw Error("write_ppm: only 3-channel images are supported");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + path.string());
    f << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

Image read_ppm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open image " + path.string());
    std::string magic;
    f >> magic;
    if (magic != "P6") throw Error(path.string() + ": not a binary PPM");
    auto next_int = [&]() {
        f >> std::ws;
        while (f.peek() == '#') {
            std::string skip;
            std::getline(f, skip);
            f >> std::ws;
        }
        std::size_t v = 0;
        if (!(f >> v)) throw Error(path.string() + ": bad PPM header");
        return v;
    };
    Image img;
    img.width = next_int();
    img.height = next_int();
    const std::size_t maxval = next_int();
    if (maxval != 255) throw Error(path.string() + ": only 8-bit PPM supported");
    f.get();
    img.channels = 3;
    img.pixels.resize(img.width * img.height * 3);
    f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!f) throw Error(path.string() + ": truncated pixel data");
    return img;
}

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
    if (image.height == height && image.width == width) return image;
    Image out{height, width, image.channels, std::vector<std::uint8_t>(height * width * image.channels)};
    const double sy = static_cast<double>(image.height) / static_cast<double>(height);
    const double sx = static_cast<double>(image.width) / static_cast<double>(width);
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, image.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, image.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < image.channels; ++c) {
                const double v = (1 - wy) * ((1 - wx) * image.at(y0, x0, c) + wx * image.at(y0, x1, c)) +
                                 wy * ((1 - wx) * image.at(y1, x0, c) + wx * image.at(y1, x1, c));
                out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

Tensor images_to_tensor(const std::vector<const Image*>& images, std::size_t size) {
    Tensor t({images.size(), size, size, 3});
    for (std::size_t b = 0; b < images.size(); ++b) {
        const Image* src = images[b];
        if (src->channels != 3) throw ShapeError("images_to_tensor: expected 3 channels");
        Image resized;
        if (src->height != size || src->width != size) {
            resized = resize_bilinear(*src, size, size);
            src = &resized;
        }
        double* dst = t.data() + b * size * size * 3;
        for (std::size_t i = 0; i < size * size * 3; ++i) dst[i] = (src->pixels[i] / 255.0 - 0.5) * 2.0;
    }
    return t;
}

} // namespace keepfit::data
