#include "patchlens/position_map.hpp"

#include "patchlens/errors.hpp"

namespace patchlens {

PositionMap PositionMap::text_only(int length, Span question) {
    PositionMap m;
    m.length_ = length;
    m.question_ = question;
    m.validate();
    return m;
}

PositionMap PositionMap::with_visual(int length, Span visual, int rows, int cols, Span question) {
    PositionMap m;
    m.length_ = length;
    m.visual_ = visual;
    m.rows_ = rows;
    m.cols_ = cols;
    m.question_ = question;
    m.validate();
    return m;
}

GridCell PositionMap::cell_of(int position) const {
    if (!is_visual(position)) {
        throw InputError("position " + std::to_string(position) + " is not in the visual span");
    }
    const int idx = position - visual_.begin;
    return {idx / cols_, idx % cols_};
}

int PositionMap::position_of(GridCell cell) const {
    if (cell.row < 0 || cell.row >= rows_ || cell.col < 0 || cell.col >= cols_) {
        throw IndexError("grid cell (" + std::to_string(cell.row) + "," + std::to_string(cell.col) +
                         ") outside " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    return visual_.begin + cell.row * cols_ + cell.col;
}

void PositionMap::validate() const {
    if (length_ < 1) throw InputError("position map: length must be >= 1");
    auto inside = [&](const Span& s) { return s.empty() || (s.begin >= 0 && s.end <= length_); };
    if (!inside(visual_) || !inside(question_)) {
        throw InputError("position map: span outside [0, length)");
    }
    if (visual_.overlaps(question_)) throw InputError("position map: visual and question spans overlap");
    if (visual_.empty()) {
        if (rows_ != 0 || cols_ != 0) throw InputError("position map: grid without visual span");
        return;
    }
    if (rows_ < 1 || cols_ < 1 || rows_ * cols_ != visual_.size()) {
        throw InputError("position map: grid " + std::to_string(rows_) + "x" + std::to_string(cols_) +
                         " does not cover visual span of " + std::to_string(visual_.size()));
    }
}

}  // namespace patchlens
