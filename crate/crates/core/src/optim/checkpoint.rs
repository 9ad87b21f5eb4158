//! Checkpoints: a text manifest naming every tensor, then the tensors as
//! `NST1` blobs in manifest order.
//!
//! ```text
//! NSCK1
//! role region
//! width 0.25
//! input_c 1
//! dropout 0.1
//! param initial.conv.weight 3 1 3 3
//! buffer initial.bn.running_mean 1 4 1 1
//! ...
//! end
//! <blobs>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::enet::{build_enet_with_dropout, Enet, Role, TensorKind};
use crate::error::{bail, Error, Result};
use crate::nst::{read_tensor, write_tensor};
use crate::rng::Rng;

const MAGIC: &str = "NSCK1";

pub fn checkpoint_bytes(model: &Enet<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let dropout = model.encoder.first().map_or(0.0, |b| b.spec().dropout_rate);
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "role {}", model.role)?;
    writeln!(out, "width {}", model.width)?;
    writeln!(out, "input_c {}", model.input_c)?;
    writeln!(out, "dropout {dropout}")?;
    let named = model.named();
    for n in &named {
        let d = n.tensor.dims();
        let kind = match n.kind {
            TensorKind::Param => "param",
            TensorKind::Buffer => "buffer",
        };
        writeln!(out, "{kind} {} {} {} {} {}", n.name, d.n, d.c, d.h, d.w)?;
    }
    writeln!(out, "end")?;
    for n in &named {
        write_tensor(n.tensor, &mut out)?;
    }
    Ok(out)
}

pub fn write_checkpoint(model: &Enet<f32>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

fn header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    if r.read_line(&mut line).map_err(|e| Error::Format(format!("unreadable checkpoint header: {e}")))? == 0 {
        bail!(Format, "checkpoint header ends early");
    }
    Ok(line.trim_end_matches('\n').to_string())
}

fn field<T: std::str::FromStr, R: BufRead>(r: &mut R, key: &str) -> Result<T> {
    let line = header_line(r)?;
    match line.split_once(' ') {
        Some((k, v)) if k == key => v.parse().map_err(|_| Error::Format(format!("bad {key} value {v:?}"))),
        _ => bail!(Format, "expected {key:?} line, found {line:?}"),
    }
}

pub fn read_checkpoint_from<R: Read>(input: R) -> Result<Enet<f32>> {
    let mut r = BufReader::new(input);
    if header_line(&mut r)? != MAGIC {
        bail!(Format, "not a checkpoint (missing {MAGIC} magic)");
    }
    let role: Role = field::<String, _>(&mut r, "role")?.parse().map_err(|e: Error| Error::Format(e.to_string()))?;
    let width: f64 = field(&mut r, "width")?;
    let input_c: usize = field(&mut r, "input_c")?;
    let dropout: f64 = field(&mut r, "dropout")?;
    let mut model = build_enet_with_dropout::<f32>(role, width, input_c, dropout, &mut Rng::new(0))
        .map_err(|e| Error::Format(format!("checkpoint describes an invalid model: {e}")))?;
    let mut entries = Vec::new();
    loop {
        let line = header_line(&mut r)?;
        if line == "end" {
            break;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 6 {
            bail!(Format, "bad tensor line {line:?}");
        }
        let dims: Vec<usize> = parts[2..]
            .iter()
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad dim in {line:?}"))))
            .collect::<Result<_>>()?;
        entries.push((parts[0].to_string(), parts[1].to_string(), dims));
    }
    let mut named = model.named_mut();
    if entries.len() != named.len() {
        bail!(Format, "checkpoint lists {} tensors, model has {}", entries.len(), named.len());
    }
    for ((kind, name, dims), slot) in entries.iter().zip(named.iter_mut()) {
        let d = slot.tensor.dims();
        let want_kind = if slot.kind == TensorKind::Param { "param" } else { "buffer" };
        if *name != slot.name || kind != want_kind || dims[..] != [d.n, d.c, d.h, d.w] {
            bail!(Format, "tensor {name} ({kind} {dims:?}) does not match model slot {} ({want_kind} {d:?})", slot.name);
        }
    }
    for slot in named.iter_mut() {
        let t = read_tensor::<f32, _>(&mut r).map_err(|e| Error::Format(format!("tensor {}: {e}", slot.name)))?;
        if t.dims() != slot.tensor.dims() {
            bail!(Format, "blob for {} has dims {:?}", slot.name, t.dims());
        }
        if !t.is_finite() {
            bail!(Format, "blob for {} holds non-finite values", slot.name);
        }
        *slot.tensor = t;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        bail!(Format, "trailing bytes after the last tensor");
    }
    drop(named);
    Ok(model)
}

pub fn read_checkpoint(path: &Path) -> Result<Enet<f32>> {
    read_checkpoint_from(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enet::build_enet;

    fn model() -> Enet<f32> {
        build_enet(Role::Boundary, 0.25, 1, &mut Rng::new(5)).unwrap()
    }

    fn edit_header(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
        let end = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        let head = std::str::from_utf8(&bytes[..end]).unwrap();
        assert!(head.contains(from), "{from}");
        [head.replacen(from, to, 1).as_bytes(), &bytes[end..]].concat()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut m = model();
        for n in m.named_mut() {
            if n.name.ends_with("running_var") {
                n.tensor.data_mut()[0] = 2.5;
            }
        }
        let bytes = checkpoint_bytes(&m).unwrap();
        let back = read_checkpoint_from(&bytes[..]).unwrap();
        assert_eq!(back, m);
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let bytes = checkpoint_bytes(&model()).unwrap();
        let cases: Vec<Vec<u8>> = vec![
            b"garbage".to_vec(),
            bytes[..bytes.len() - 3].to_vec(),
            [&bytes[..], b"x"].concat(),
            edit_header(&bytes, "role boundary", "role banana"),
            edit_header(&bytes, "width 0.25", "width 0.5"),
            edit_header(&bytes, "dec04.out.slope", "dec04.out.slopes"),
        ];
        for c in cases {
            assert!(matches!(read_checkpoint_from(&c[..]), Err(Error::Format(_))));
        }
    }
}
