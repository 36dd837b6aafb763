//! Minimal binary PPM (P6) reader, just enough to move photographs into
//! the tensor pipeline without an image dependency. Output is `[3,H,W]`
//! with values scaled to [0, 1].

use kernelspot::{Error, Result, TensorMap};

fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::parse("unexpected end of PPM header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .map(str::to_string)
        .map_err(|_| Error::parse("PPM header is not ASCII"))
}

fn dim(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let t = token(bytes, pos)?;
    t.parse()
        .map_err(|_| Error::parse(format!("bad PPM {what}: `{t}`")))
}

pub fn parse_ppm(bytes: &[u8]) -> Result<TensorMap> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(Error::parse(format!("expected P6 magic, got `{magic}`")));
    }
    let w = dim(bytes, &mut pos, "width")?;
    let h = dim(bytes, &mut pos, "height")?;
    let maxval = dim(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::parse(format!(
            "only 8-bit PPMs are supported (maxval 1..=255), got {maxval}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::parse("PPM has a zero dimension"));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::parse("missing separator after PPM maxval"));
    }
    pos += 1;
    let need = 3 * h * w;
    let raw = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::parse(format!("PPM truncated: expected {need} pixel bytes")))?;
    let mut t = TensorMap::zeros(&[3, h, w]);
    for i in 0..h * w {
        for ch in 0..3 {
            t.data_mut()[ch * h * w + i] = raw[3 * i + ch] as f32 / maxval as f32;
        }
    }
    Ok(t)
}

pub fn read_ppm_file(path: impl AsRef<std::path::Path>) -> Result<TensorMap> {
    parse_ppm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_p6_with_comments_and_normalizes() {
        let mut bytes = b"P6\n# a comment\n2 1 # inline\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 128, 255]);
        let t = parse_ppm(&bytes).unwrap();
        assert_eq!(t.dims(), [3, 1, 2]);
        assert_eq!(t.at3(0, 0, 0), 1.0);
        assert_eq!(t.at3(1, 0, 0), 0.0);
        assert!((t.at3(1, 0, 1) - 128.0 / 255.0).abs() < 1e-7);
        assert_eq!(t.at3(2, 0, 1), 1.0);
    }

    #[test]
    fn scales_by_maxval() {
        let mut bytes = b"P6 1 1 100\n".to_vec();
        bytes.extend_from_slice(&[50, 100, 0]);
        let t = parse_ppm(&bytes).unwrap();
        assert_eq!(t.at3(0, 0, 0), 0.5);
        assert_eq!(t.at3(1, 0, 0), 1.0);
    }

    #[test]
    fn rejects_bad_headers_and_truncation() {
        assert!(parse_ppm(b"P5 1 1 255\n\0").is_err(), "wrong magic");
        assert!(parse_ppm(b"P6 1 1 65535\n\0\0\0\0\0\0").is_err(), "16-bit");
        assert!(parse_ppm(b"P6 2 2 255\n\0\0\0").is_err(), "truncated");
        assert!(parse_ppm(b"P6 1 1").is_err(), "header cut short");
    }
}
