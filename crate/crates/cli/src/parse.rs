//! Value parsers for the compound flags.

use eco_core::encoder::EncoderConfig;

/// `(D, N)` cells of a sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<(usize, usize)>);

/// Parses `"16x1,8x2"` into `(D, N)` pairs.
pub fn grid(text: &str) -> Result<Grid, String> {
    let mut cells = Vec::new();
    for token in text.split(',') {
        let token = token.trim();
        let parsed = token
            .split_once(['x', 'X'])
            .and_then(|(d, n)| Some((d.trim().parse::<usize>().ok()?, n.trim().parse::<usize>().ok()?)))
            .filter(|&(d, n)| d > 0 && n > 0);
        match parsed {
            Some(cell) => cells.push(cell),
            None => return Err(format!("malformed grid token {token:?} (expected DxN, e.g. 4x4)")),
        }
    }
    Ok(Grid(cells))
}

/// `toy`, optionally followed by `key=value` overrides, e.g.
/// `toy,layers=1,width=32`.
pub fn dim_config(text: &str) -> Result<EncoderConfig, String> {
    let mut parts = text.split(',').map(str::trim);
    let base = parts.next().unwrap_or_default();
    if base != "toy" {
        return Err(format!("unknown dimension preset {base:?} (only \"toy\" is built in)"));
    }
    let mut c = EncoderConfig::toy();
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("malformed override {part:?} (expected key=value)"))?;
        let n = || {
            value
                .parse::<usize>()
                .map_err(|_| format!("override {key} needs a non-negative integer, got {value:?}"))
        };
        match key {
            "layers" => c.layers = n()?,
            "heads" => c.heads = n()?,
            "width" => c.width = n()?,
            "output_dim" => c.output_dim = n()?,
            "max_positions" => c.max_positions = n()?,
            "vocab_size" => c.vocab_size = n()?,
            _ => return Err(format!("unknown override key {key:?}")),
        }
    }
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}
