use super::{elements, Molecule};
use crate::error::{Error, Result};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses a single-frame XYZ file: atom count, comment line (used as the
/// id), then one `symbol x y z` line per atom. Symbols match
/// case-insensitively; a bare atomic number is accepted as well.
pub fn parse_xyz(text: &str) -> Result<Molecule> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, count_line) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let count: usize = count_line
        .trim()
        .parse()
        .map_err(|_| parse_err(1, format!("invalid atom count {:?}", count_line.trim())))?;
    if count == 0 {
        return Err(parse_err(1, "atom count must be positive"));
    }
    let id = lines
        .next()
        .map(|(_, l)| l.trim().to_string())
        .unwrap_or_default();

    let mut atoms = Vec::with_capacity(count);
    let mut coords = Vec::with_capacity(count);
    let mut last_line = 2;
    for (no, line) in lines {
        last_line = no;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if atoms.len() == count {
            return Err(parse_err(no, format!("expected {count} atoms, found more")));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(parse_err(
                no,
                format!("expected `symbol x y z`, got {line:?}"),
            ));
        }
        let z = elements::atomic_number(fields[0])
            .or_else(|| {
                fields[0]
                    .parse::<u8>()
                    .ok()
                    .filter(|z| (1..=elements::MAX_ATOMIC_NUMBER).contains(z))
            })
            .ok_or_else(|| parse_err(no, format!("unknown element symbol {:?}", fields[0])))?;
        let mut p = [0.0; 3];
        for (k, f) in fields[1..4].iter().enumerate() {
            p[k] = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(no, format!("malformed number {f:?}")))?;
        }
        atoms.push(z);
        coords.push(p);
    }
    if atoms.len() != count {
        return Err(parse_err(
            last_line,
            format!("expected {count} atoms, found {}", atoms.len()),
        ));
    }
    Molecule::new(id, atoms, coords)
}

/// Writes XYZ with shortest round-trip float formatting.
pub fn write_xyz(m: &Molecule) -> String {
    let mut out = format!("{}\n{}\n", m.len(), m.id);
    for (&z, p) in m.atoms().iter().zip(m.coords()) {
        let sym = elements::symbol(z).unwrap_or("X");
        out.push_str(&format!("{sym} {:?} {:?} {:?}\n", p[0], p[1], p[2]));
    }
    out
}
