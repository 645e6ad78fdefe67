//! A 5×7 bitmap font for `0-9a-z`.

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

#[rustfmt::skip]
const ROWS: [[&str; 7]; 36] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
    [".....", ".....", ".###.", "....#", ".####", "#...#", ".####"],
    ["#....", "#....", "#.##.", "##..#", "#...#", "#...#", "####."],
    [".....", ".....", ".###.", "#....", "#....", "#...#", ".###."],
    ["....#", "....#", ".##.#", "#..##", "#...#", "#...#", ".####"],
    [".....", ".....", ".###.", "#...#", "#####", "#....", ".###."],
    ["..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."],
    [".....", ".####", "#...#", "#...#", ".####", "....#", ".###."],
    ["#....", "#....", "#.##.", "##..#", "#...#", "#...#", "#...#"],
    ["..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."],
    ["...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."],
    ["#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."],
    [".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".....", ".....", "##.#.", "#.#.#", "#.#.#", "#...#", "#...#"],
    [".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"],
    [".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."],
    [".....", ".....", "####.", "#...#", "####.", "#....", "#...."],
    [".....", ".....", ".##.#", "#..##", ".####", "....#", "....#"],
    [".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."],
    [".....", ".....", ".###.", "#....", ".###.", "....#", "####."],
    [".#...", ".#...", "###..", ".#...", ".#...", ".#..#", "..##."],
    [".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"],
    [".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
    [".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."],
    [".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    [".....", ".....", "#...#", "#...#", ".####", "....#", ".###."],
    [".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"],
];

/// Whether cell (`col`, `row`) of the glyph for class `index` is inked.
pub fn ink(index: usize, col: usize, row: usize) -> bool {
    col < GLYPH_W && row < GLYPH_H && ROWS[index][row].as_bytes()[col] == b'#'
}
