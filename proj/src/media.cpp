#include "syncflow/media.hpp"

#include <sstream>

namespace syncflow {

const char* color_name(BallColor c)
{
    switch (c) {
    case BallColor::kRed: return "red";
    case BallColor::kGreen: return "green";
    default: return "blue";
    }
}

const char* speed_name(Speed s)
{
    return s == Speed::kSlow ? "slow" : "fast";
}

double tone_frequency(BallColor c)
{
    switch (c) {
    case BallColor::kRed: return 330.0;
    case BallColor::kGreen: return 440.0;
    default: return 550.0;
    }
}

std::string make_caption(BallColor color, Speed speed)
{
    return std::string("a ") + color_name(color) + " ball bouncing " + speed_name(speed);
}

bool parse_caption(const std::string& caption, BallColor& color, Speed& speed)
{
    for (int c = 0; c < 3; ++c)
        for (int s = 0; s < 2; ++s)
            if (caption == make_caption(static_cast<BallColor>(c), static_cast<Speed>(s))) {
                color = static_cast<BallColor>(c);
                speed = static_cast<Speed>(s);
                return true;
            }
    return false;
}

} // namespace syncflow
