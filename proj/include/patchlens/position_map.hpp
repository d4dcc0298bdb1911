#pragma once

#include <string>
#include <vector>

namespace patchlens {

// Half-open index range [begin, end) over sequence positions (0-based).
struct Span {
    int begin = 0;
    int end = 0;

    int size() const { return end - begin; }
    bool empty() const { return end <= begin; }
    bool contains(int p) const { return p >= begin && p < end; }
    bool overlaps(const Span& o) const { return !empty() && !o.empty() && begin < o.end && o.begin < end; }
    bool operator==(const Span&) const = default;
};

struct GridCell {
    int row = 0;
    int col = 0;
    bool operator==(const GridCell&) const = default;
};

// Bookkeeping between sequence positions and their roles: the visual patch
// span (row-major over a rows x cols grid), the question span, and the last
// position that queries everything else.
class PositionMap {
public:
    PositionMap() = default;

    static PositionMap text_only(int length, Span question = {});
    static PositionMap with_visual(int length, Span visual, int rows, int cols, Span question = {});

    int length() const { return length_; }
    int last() const { return length_ - 1; }
    const Span& visual() const { return visual_; }
    const Span& question() const { return question_; }
    int rows() const { return rows_; }
    int cols() const { return cols_; }
    bool has_visual() const { return !visual_.empty(); }

    bool is_visual(int position) const { return visual_.contains(position); }
    // Throws InputError for non-visual positions.
    GridCell cell_of(int position) const;
    // Throws IndexError for cells outside the grid.
    int position_of(GridCell cell) const;

    // Throws InputError when spans overlap, leave [0, length), or the grid
    // does not cover the visual span exactly.
    void validate() const;

private:
    int length_ = 0;
    Span visual_;
    Span question_;
    int rows_ = 0;
    int cols_ = 0;
};

}  // namespace patchlens
