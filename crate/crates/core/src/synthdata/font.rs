//! Fixed 3x5 bitmap font: digits, uppercase Latin, and a few symbols.
//! One cell per character id; ids are contiguous from 0 in `CHARSET` order.

pub const CELL_W: usize = 3;
pub const CELL_H: usize = 5;

pub const CHARSET: &str = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ-+!?.:";

// Five rows of three pixels per glyph, '1' = ink.
const GLYPHS: &[(char, [&str; 5])] = &[
    ('0', ["111", "101", "101", "101", "111"]),
    ('1', ["010", "110", "010", "010", "111"]),
    ('2', ["111", "001", "111", "100", "111"]),
    ('3', ["111", "001", "011", "001", "111"]),
    ('4', ["101", "101", "111", "001", "001"]),
    ('5', ["111", "100", "111", "001", "110"]),
    ('6', ["011", "100", "111", "101", "111"]),
    ('7', ["111", "001", "010", "010", "010"]),
    ('8', ["111", "101", "111", "101", "111"]),
    ('9', ["111", "101", "111", "001", "110"]),
    ('A', ["010", "101", "111", "101", "101"]),
    ('B', ["110", "101", "110", "101", "110"]),
    ('C', ["011", "100", "100", "100", "011"]),
    ('D', ["110", "101", "101", "101", "110"]),
    ('E', ["111", "100", "110", "100", "111"]),
    ('F', ["111", "100", "110", "100", "100"]),
    ('G', ["011", "100", "101", "101", "011"]),
    ('H', ["101", "101", "111", "101", "101"]),
    ('I', ["111", "010", "010", "010", "111"]),
    ('J', ["001", "001", "001", "101", "010"]),
    ('K', ["101", "110", "100", "110", "101"]),
    ('L', ["100", "100", "100", "100", "111"]),
    ('M', ["101", "111", "111", "101", "101"]),
    ('N', ["101", "111", "101", "101", "101"]),
    ('O', ["010", "101", "101", "101", "010"]),
    ('P', ["110", "101", "110", "100", "100"]),
    ('Q', ["010", "101", "101", "011", "001"]),
    ('R', ["110", "101", "110", "101", "101"]),
    ('S', ["011", "100", "010", "001", "110"]),
    ('T', ["111", "010", "010", "010", "010"]),
    ('U', ["101", "101", "101", "101", "111"]),
    ('V', ["101", "101", "101", "101", "010"]),
    ('W', ["101", "101", "111", "111", "101"]),
    ('X', ["101", "101", "010", "101", "101"]),
    ('Y', ["101", "101", "010", "010", "010"]),
    ('Z', ["111", "001", "010", "100", "111"]),
    ('-', ["000", "000", "111", "000", "000"]),
    ('+', ["000", "010", "111", "010", "000"]),
    ('!', ["010", "010", "010", "000", "010"]),
    ('?', ["110", "001", "010", "000", "010"]),
    ('.', ["000", "000", "000", "000", "010"]),
    (':', ["000", "010", "000", "010", "000"]),
];

/// The glyph table. Cells are row-major 3x5 grids of 0/1.
#[derive(Clone, Debug)]
pub struct FontTable {
    chars: Vec<char>,
    cells: Vec<[u8; CELL_W * CELL_H]>,
}

impl Default for FontTable {
    fn default() -> Self {
        Self::new()
    }
}

impl FontTable {
    pub fn new() -> Self {
        let mut chars = Vec::with_capacity(GLYPHS.len());
        let mut cells = Vec::with_capacity(GLYPHS.len());
        for (c, rows) in GLYPHS {
            let mut cell = [0u8; CELL_W * CELL_H];
            for (r, row) in rows.iter().enumerate() {
                for (col, ch) in row.bytes().enumerate() {
                    cell[r * CELL_W + col] = (ch == b'1') as u8;
                }
            }
            chars.push(*c);
            cells.push(cell);
        }
        Self { chars, cells }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c)
    }

    pub fn char_at(&self, id: usize) -> char {
        self.chars[id]
    }

    /// Row-major 3x5 cell for a character id.
    pub fn cell(&self, id: usize) -> &[u8; CELL_W * CELL_H] {
        &self.cells[id]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_consistent_with_charset() {
        let font = FontTable::new();
        assert_eq!(font.len(), CHARSET.chars().count());
        for (i, c) in CHARSET.chars().enumerate() {
            assert_eq!(font.char_id(c), Some(i));
            assert_eq!(font.char_at(i), c);
        }
        assert_eq!(font.char_id(' '), None);
    }

    #[test]
    fn all_cells_are_three_by_five_and_distinct() {
        let font = FontTable::new();
        for i in 0..font.len() {
            assert_eq!(font.cell(i).len(), 15);
        }
        for i in 0..font.len() {
            for j in (i + 1)..font.len() {
                assert_ne!(
                    font.cell(i),
                    font.cell(j),
                    "glyphs {:?} and {:?} collide",
                    font.char_at(i),
                    font.char_at(j)
                );
            }
        }
    }
}
