//! Built-in 8×8 digit glyphs, so the image dataset needs no external files.

/// Glyph bitmaps for digits 0-9; `#` marks a foreground pixel.
const GLYPHS: [[&str; 8]; 10] = [
    [
        "..####..",
        ".#....#.",
        ".#...##.",
        ".#..#.#.",
        ".#.#..#.",
        ".##...#.",
        "..####..",
        "........",
    ],
    [
        "...##...",
        "..###...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "..####..",
        "........",
    ],
    [
        "..####..",
        ".#....#.",
        "......#.",
        ".....#..",
        "...##...",
        "..#.....",
        ".######.",
        "........",
    ],
    [
        "..####..",
        ".#....#.",
        "......#.",
        "...###..",
        "......#.",
        ".#....#.",
        "..####..",
        "........",
    ],
    [
        "....##..",
        "...#.#..",
        "..#..#..",
        ".#...#..",
        ".######.",
        ".....#..",
        ".....#..",
        "........",
    ],
    [
        ".######.",
        ".#......",
        ".#####..",
        "......#.",
        "......#.",
        ".#....#.",
        "..####..",
        "........",
    ],
    [
        "..####..",
        ".#......",
        ".#####..",
        ".#....#.",
        ".#....#.",
        ".#....#.",
        "..####..",
        "........",
    ],
    [
        ".######.",
        "......#.",
        ".....#..",
        "....#...",
        "...#....",
        "...#....",
        "...#....",
        "........",
    ],
    [
        "..####..",
        ".#....#.",
        ".#....#.",
        "..####..",
        ".#....#.",
        ".#....#.",
        "..####..",
        "........",
    ],
    [
        "..####..",
        ".#....#.",
        ".#....#.",
        "..#####.",
        "......#.",
        ".....#..",
        "..###...",
        "........",
    ],
];

/// The 8×8 bitmap of `digit` as row-major booleans.
pub fn glyph(digit: u8) -> [[bool; 8]; 8] {
    let rows = &GLYPHS[digit as usize % 10];
    let mut out = [[false; 8]; 8];
    for (r, row) in rows.iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            out[r][c] = ch == b'#';
        }
    }
    out
}
