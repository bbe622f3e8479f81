//! Frozen 8×8 glyph templates for the ten digit classes.
//!
//! `#` is ink, `.` is background. Every glyph leaves a one-pixel margin so
//! that a ±1 translation never clips ink.

pub const SIDE: usize = 8;

pub const GLYPHS: [[&str; SIDE]; 10] = [
    [
        "........", "..###...", ".#...#..", ".#...#..", ".#...#..", ".#...#..", "..###...",
        "........",
    ],
    [
        "........", "...#....", "..##....", "...#....", "...#....", "...#....", "..###...",
        "........",
    ],
    [
        "........", "..###...", ".#...#..", "....#...", "...#....", "..#.....", ".#####..",
        "........",
    ],
    [
        "........", ".####...", ".....#..", "..###...", ".....#..", ".....#..", ".####...",
        "........",
    ],
    [
        "........", "....#...", "...##...", "..#.#...", ".#####..", "....#...", "....#...",
        "........",
    ],
    [
        "........", ".#####..", ".#......", ".####...", ".....#..", ".....#..", ".####...",
        "........",
    ],
    [
        "........", "...##...", "..#.....", ".####...", ".#...#..", ".#...#..", "..###...",
        "........",
    ],
    [
        "........", ".#####..", ".....#..", "....#...", "...#....", "...#....", "...#....",
        "........",
    ],
    [
        "........", "..###...", ".#...#..", "..###...", ".#...#..", ".#...#..", "..###...",
        "........",
    ],
    [
        "........", "..###...", ".#...#..", ".#...#..", "..####..", ".....#..", "..###...",
        "........",
    ],
];

/// Binary mask of glyph `class`, row-major `SIDE × SIDE`.
pub fn mask(class: usize) -> [bool; SIDE * SIDE] {
    let mut out = [false; SIDE * SIDE];
    for (r, row) in GLYPHS[class].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            out[r * SIDE + c] = ch == b'#';
        }
    }
    out
}

/// Mask translated by `(dy, dx)` with zero fill.
pub fn shifted(m: &[bool; SIDE * SIDE], dy: isize, dx: isize) -> [bool; SIDE * SIDE] {
    let mut out = [false; SIDE * SIDE];
    for r in 0..SIDE as isize {
        for c in 0..SIDE as isize {
            let (sr, sc) = (r - dy, c - dx);
            if (0..SIDE as isize).contains(&sr) && (0..SIDE as isize).contains(&sc) {
                out[(r * SIDE as isize + c) as usize] = m[(sr * SIDE as isize + sc) as usize];
            }
        }
    }
    out
}

/// One-step dilation with the 4-neighbourhood cross.
pub fn dilate(m: &[bool; SIDE * SIDE]) -> [bool; SIDE * SIDE] {
    let mut out = *m;
    for r in 0..SIDE {
        for c in 0..SIDE {
            if !m[r * SIDE + c] {
                continue;
            }
            if r > 0 {
                out[(r - 1) * SIDE + c] = true;
            }
            if r + 1 < SIDE {
                out[(r + 1) * SIDE + c] = true;
            }
            if c > 0 {
                out[r * SIDE + c - 1] = true;
            }
            if c + 1 < SIDE {
                out[r * SIDE + c + 1] = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_well_formed_and_distinct() {
        for g in GLYPHS.iter() {
            for row in g {
                assert_eq!(row.len(), SIDE);
            }
            assert!(g[0].bytes().all(|b| b == b'.'));
            assert!(g[SIDE - 1].bytes().all(|b| b == b'.'));
            assert!(g.iter().all(|r| r.as_bytes()[0] == b'.'));
        }
        for a in 0..10 {
            for b in a + 1..10 {
                let diff = mask(a).iter().zip(mask(b).iter()).filter(|(x, y)| x != y).count();
                assert!(diff >= 3, "glyphs {a} and {b} differ in only {diff} pixels");
            }
        }
    }

    #[test]
    fn shift_round_trips_inside_margin() {
        let m = mask(8);
        assert_eq!(shifted(&shifted(&m, 1, -1), -1, 1), m);
    }
}
