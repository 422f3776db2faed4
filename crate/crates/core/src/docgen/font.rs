//! 5×7 dot-matrix glyphs and cell rendering.
//!
//! One fixed bitmap per renderable character, written as string art so a
//! broken glyph is visible in the diff that broke it. The letter shapes
//! follow the classic LED-matrix uppercase forms; what matters here is not
//! typography but that every pair of glyphs differs in at least one dot.

use crate::{Error, Result};

pub const GLYPH_ROWS: usize = 7;
pub const GLYPH_COLS: usize = 5;

/// Bitmap rows for one character, `#` = ink. Space is all blank.
pub fn glyph_bitmap(ch: char) -> Result<[&'static str; GLYPH_ROWS]> {
    let rows = match ch {
        'a' => [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
        'b' => ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
        'c' => [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
        'd' => ["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."],
        'e' => ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
        'f' => ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
        'g' => [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."],
        'h' => ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
        'i' => [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
        'j' => ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
        'k' => ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
        'l' => ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
        'm' => ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
        'n' => ["#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"],
        'o' => [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
        'p' => ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
        'q' => [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"],
        'r' => ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
        's' => [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
        't' => ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
        'u' => ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
        'v' => ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
        'w' => ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"],
        'x' => ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
        'y' => ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."],
        'z' => ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],
        '0' => [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
        '1' => ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
        '2' => [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
        '3' => ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
        '4' => ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
        '5' => ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
        '6' => ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
        '7' => ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
        '8' => [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
        '9' => [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
        ':' => [".....", ".##..", ".##..", ".....", ".##..", ".##..", "....."],
        '.' => [".....", ".....", ".....", ".....", ".....", ".##..", ".##.."],
        '/' => ["....#", "...#.", "...#.", "..#..", ".#...", ".#...", "#...."],
        '-' => [".....", ".....", ".....", "#####", ".....", ".....", "....."],
        ' ' => [".....", ".....", ".....", ".....", ".....", ".....", "....."],
        other => return Err(Error::Contract(format!("no glyph for character {other:?}"))),
    };
    Ok(rows)
}

/// Render one glyph into an h×w cell, ink = 1.0, blank = 0.0.
///
/// The bitmap is scaled by nearest neighbor; the map is onto the full
/// 5×7 grid for any cell at least that large, so distinct bitmaps stay
/// distinct after scaling.
pub fn render_glyph(ch: char, h: usize, w: usize) -> Result<Vec<f64>> {
    let rows = glyph_bitmap(ch)?;
    let mut cell = vec![0.0; h * w];
    for r in 0..h {
        let br = r * GLYPH_ROWS / h;
        let row = rows[br].as_bytes();
        for c in 0..w {
            let bc = c * GLYPH_COLS / w;
            if row[bc] == b'#' {
                cell[r * w + c] = 1.0;
            }
        }
    }
    Ok(cell)
}
