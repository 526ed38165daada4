//! Bit-exact tensor container used for datasets, checkpoints, batches,
//! and embedded manifests.
//!
//! Layout, all little-endian: magic "NMID1", u64 entry count, an entry
//! table of (name, shape, absolute payload offset), then f64 payloads.
//! One dtype (f64) removes conversion ambiguity; round-trips preserve
//! exact bit patterns. Strings ride along as byte-valued f64 tensors
//! under reserved names ("__manifest", "__manifest_hash").

use crate::config::RunManifest;
use crate::datasets::{Batch, DatasetSplit};
use crate::error::{Error, Result};
use crate::tensor::nn::{Dense, Mlp};
use crate::tensor::Tensor;
use std::path::Path;

pub const MAGIC: &[u8; 5] = b"NMID1";
pub const MANIFEST_ENTRY: &str = "__manifest";
pub const MANIFEST_HASH_ENTRY: &str = "__manifest_hash";

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_u64(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u64> {
    if *pos + 8 > bytes.len() {
        return Err(Error::format(what, "truncated while reading length field"));
    }
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&bytes[*pos..*pos + 8]);
    *pos += 8;
    Ok(u64::from_le_bytes(buf))
}

/// Serialize entries to container bytes. Names must be unique.
pub fn encode(entries: &[(String, Tensor)]) -> Result<Vec<u8>> {
    for (i, (name, _)) in entries.iter().enumerate() {
        if entries[..i].iter().any(|(other, _)| other == name) {
            return Err(Error::format(name, "duplicate entry name"));
        }
    }
    // Table size must be known to compute absolute offsets: two passes.
    let mut table_len = MAGIC.len() + 8;
    for (name, t) in entries {
        table_len += 8 + name.len() + 8 + 8 * t.shape().len() + 8;
    }
    let mut out = Vec::with_capacity(table_len);
    out.extend_from_slice(MAGIC);
    push_u64(&mut out, entries.len() as u64);
    let mut offset = table_len as u64;
    for (name, t) in entries {
        push_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        push_u64(&mut out, t.shape().len() as u64);
        for &d in t.shape() {
            push_u64(&mut out, d as u64);
        }
        push_u64(&mut out, offset);
        offset += 8 * t.numel() as u64;
    }
    debug_assert_eq!(out.len(), table_len);
    for (_, t) in entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse container bytes, validating magic, offsets, and payload sizes.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format("container", "bad magic"));
    }
    let mut pos = MAGIC.len();
    let count = read_u64(bytes, &mut pos, "container")? as usize;
    let mut meta: Vec<(String, Vec<usize>, usize)> = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = read_u64(bytes, &mut pos, "container")? as usize;
        if pos + name_len > bytes.len() {
            return Err(Error::format("container", format!("entry {i}: truncated name")));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + name_len])
            .map_err(|_| Error::format("container", format!("entry {i}: name not utf-8")))?
            .to_string();
        pos += name_len;
        let rank = read_u64(bytes, &mut pos, &name)? as usize;
        if rank > 8 {
            return Err(Error::format(&name, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(bytes, &mut pos, &name)? as usize);
        }
        let offset = read_u64(bytes, &mut pos, &name)? as usize;
        if meta.iter().any(|(other, _, _)| *other == name) {
            return Err(Error::format(&name, "duplicate entry name"));
        }
        meta.push((name, shape, offset));
    }
    let table_end = pos;
    let mut expected_offset = table_end;
    let mut out = Vec::with_capacity(count);
    for (name, shape, offset) in meta {
        let numel: usize = shape.iter().product();
        if offset != expected_offset {
            return Err(Error::format(
                &name,
                format!("overlapping or out-of-order offset {offset}, expected {expected_offset}"),
            ));
        }
        let end = offset + 8 * numel;
        if end > bytes.len() {
            return Err(Error::format(&name, "truncated payload"));
        }
        let mut data = Vec::with_capacity(numel);
        for j in 0..numel {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&bytes[offset + 8 * j..offset + 8 * j + 8]);
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::format(&name, format!("invalid payload: {e}")))?;
        out.push((name, tensor));
        expected_offset = end;
    }
    if expected_offset != bytes.len() {
        return Err(Error::format("container", "trailing bytes after last payload"));
    }
    Ok(out)
}

pub fn save_container(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(entries)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { name, msg } if name == "container" => {
            Error::format(&path.display().to_string(), msg)
        }
        other => other,
    })
}

/// Text payload as a byte-valued tensor entry.
pub fn string_entry(name: &str, text: &str) -> (String, Tensor) {
    let data: Vec<f64> = text.bytes().map(|b| b as f64).collect();
    let len = data.len();
    (name.to_string(), Tensor::raw(vec![len], data))
}

/// Inverse of `string_entry`: every element must be an integral byte.
pub fn entry_text(name: &str, t: &Tensor) -> Result<String> {
    let mut bytes = Vec::with_capacity(t.numel());
    for &v in t.data() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::format(name, format!("non-byte value {v} in text entry")));
        }
        bytes.push(v as u8);
    }
    String::from_utf8(bytes).map_err(|_| Error::format(name, "text entry is not utf-8"))
}

/// Integer labels as a float tensor of integral values.
pub fn labels_entry(name: &str, labels: &[usize]) -> (String, Tensor) {
    let data: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
    let len = data.len();
    (name.to_string(), Tensor::raw(vec![len], data))
}

pub fn entry_labels(name: &str, t: &Tensor) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(t.numel());
    for &v in t.data() {
        if v.fract() != 0.0 || v < 0.0 {
            return Err(Error::format(name, format!("non-integral label {v}")));
        }
        out.push(v as usize);
    }
    Ok(out)
}

/// Look up an entry by name; missing entries are format errors naming
/// the entry.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::format(name, "entry missing from container"))
}

/// The two reserved entries carrying the manifest and its hash.
pub fn manifest_entries(manifest: &RunManifest) -> Vec<(String, Tensor)> {
    let text = manifest.to_text();
    vec![
        string_entry(MANIFEST_ENTRY, &text),
        string_entry(MANIFEST_HASH_ENTRY, &manifest.hash_hex()),
    ]
}

/// Extract and verify the embedded manifest. Hash mismatch is a version
/// error per the artifact-integrity contract.
pub fn read_manifest(entries: &[(String, Tensor)]) -> Result<RunManifest> {
    let text = entry_text(MANIFEST_ENTRY, find(entries, MANIFEST_ENTRY)?)?;
    let stored_hash = entry_text(MANIFEST_HASH_ENTRY, find(entries, MANIFEST_HASH_ENTRY)?)?;
    let manifest = RunManifest::parse(&text)?;
    if manifest.hash_hex() != stored_hash {
        return Err(Error::Version(
            "manifest hash does not match stored hash".to_string(),
        ));
    }
    Ok(manifest)
}

/// MLP weights as container entries under `prefix`: a dims entry plus
/// one weight and one bias tensor per layer.
pub fn mlp_entries(prefix: &str, mlp: &Mlp) -> Vec<(String, Tensor)> {
    let dims: Vec<f64> = mlp.dims().iter().map(|&d| d as f64).collect();
    let len = dims.len();
    let mut out = vec![(format!("{prefix}.dims"), Tensor::raw(vec![len], dims))];
    for (i, layer) in mlp.layers().iter().enumerate() {
        out.push((format!("{prefix}.layer{i}.w"), layer.w.clone()));
        out.push((format!("{prefix}.layer{i}.b"), layer.b.clone()));
    }
    out
}

/// Inverse of `mlp_entries`; width-chain and activation-pattern checks
/// happen in the MLP constructor.
pub fn read_mlp(prefix: &str, entries: &[(String, Tensor)]) -> Result<Mlp> {
    let dims_name = format!("{prefix}.dims");
    let dims_t = find(entries, &dims_name)?;
    let mut dims = Vec::with_capacity(dims_t.numel());
    for &v in dims_t.data() {
        if v.fract() != 0.0 || v < 1.0 {
            return Err(Error::format(&dims_name, format!("non-integral width {v}")));
        }
        dims.push(v as usize);
    }
    if dims.len() < 2 {
        return Err(Error::format(&dims_name, "needs at least two widths"));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for i in 0..dims.len() - 1 {
        let w = find(entries, &format!("{prefix}.layer{i}.w"))?.clone();
        let b = find(entries, &format!("{prefix}.layer{i}.b"))?.clone();
        if w.shape() != [dims[i], dims[i + 1]] {
            return Err(Error::shape(
                &format!("{prefix}.layer{i}.w"),
                &[dims[i], dims[i + 1]],
                w.shape(),
            ));
        }
        layers.push(Dense {
            w,
            b,
            relu: i + 2 < dims.len(),
        });
    }
    Mlp::from_layers(layers)
}

pub fn split_entries(split: &DatasetSplit) -> Vec<(String, Tensor)> {
    vec![
        ("inputs".to_string(), split.inputs.clone()),
        labels_entry("labels", &split.labels),
        string_entry(
            "split_meta",
            &format!(
                "name={} seed={} classes={}",
                split.name, split.seed, split.classes
            ),
        ),
    ]
}

pub fn read_split(entries: &[(String, Tensor)]) -> Result<DatasetSplit> {
    let inputs = find(entries, "inputs")?.clone();
    let labels = entry_labels("labels", find(entries, "labels")?)?;
    let meta = entry_text("split_meta", find(entries, "split_meta")?)?;
    let mut name = None;
    let mut seed = None;
    let mut classes = None;
    for field in meta.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::format("split_meta", format!("bad field `{field}`")))?;
        match k {
            "name" => name = Some(v.to_string()),
            "seed" => seed = v.parse::<u64>().ok(),
            "classes" => classes = v.parse::<usize>().ok(),
            other => return Err(Error::format("split_meta", format!("unknown field `{other}`"))),
        }
    }
    let (name, seed, classes) = match (name, seed, classes) {
        (Some(n), Some(s), Some(c)) => (n, s, c),
        _ => return Err(Error::format("split_meta", "incomplete split metadata")),
    };
    let split = DatasetSplit {
        inputs,
        labels,
        name,
        seed,
        classes,
    };
    split.validate()?;
    Ok(split)
}

/// Batch entries store natural inputs and noise; the adversarial side
/// is recomposed on load, which matches how batches are built.
pub fn batch_entries(batch: &Batch) -> Vec<(String, Tensor)> {
    vec![
        ("natural".to_string(), batch.natural().clone()),
        ("noise".to_string(), batch.noise().clone()),
        labels_entry("labels", batch.labels()),
    ]
}

pub fn read_batch(entries: &[(String, Tensor)]) -> Result<Batch> {
    let natural = find(entries, "natural")?.clone();
    let noise = find(entries, "noise")?.clone();
    let labels = entry_labels("labels", find(entries, "labels")?)?;
    Batch::from_noise(natural, noise, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::rng::SplitMix64;

    #[test]
    fn empty_container_round_trips() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(decode(&bytes).unwrap(), vec![]);
    }

    #[test]
    fn small_tensor_round_trip_bit_identical() {
        let t = Tensor::matrix(2, 2, vec![0.1, -0.2, 3.0e-300, 1.0]).unwrap();
        let bytes = encode(&[("w".to_string(), t.clone())]).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "w");
        for (a, b) in t.data().iter().zip(back[0].1.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn many_random_tensors_round_trip() {
        let mut rng = SplitMix64::new(77);
        let mut entries = Vec::new();
        for i in 0..100 {
            let rows = 1 + (rng.next_below(6) as usize);
            let cols = 1 + (rng.next_below(6) as usize);
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| rng.next_range(-1e6, 1e6))
                .collect();
            entries.push((format!("t{i}"), Tensor::raw(vec![rows, cols], data)));
        }
        let bytes = encode(&entries).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(entries.len(), back.len());
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1
                .data()
                .iter()
                .zip(t2.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // Re-encoding the decoded entries reproduces the bytes.
        assert_eq!(bytes, encode(&back).unwrap());
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = Tensor::scalar(1.0);
        let err = encode(&[("a".into(), t.clone()), ("a".into(), t)]).unwrap_err();
        match err {
            Error::Format { name, .. } => assert_eq!(name, "a"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let t = Tensor::scalar(2.5);
        let mut bytes = encode(&[("x".into(), t)]).unwrap();
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        assert!(matches!(decode(&corrupted), Err(Error::Format { .. })));
        bytes.truncate(bytes.len() - 4);
        let err = decode(&bytes).unwrap_err();
        match err {
            Error::Format { name, .. } => assert_eq!(name, "x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn string_and_labels_round_trip() {
        let (name, t) = string_entry("__manifest", "hello=1\n");
        assert_eq!(entry_text(&name, &t).unwrap(), "hello=1\n");
        let (name, t) = labels_entry("labels", &[0, 3, 1]);
        assert_eq!(entry_labels(&name, &t).unwrap(), vec![0, 3, 1]);
    }

    #[test]
    fn manifest_embedding_detects_tamper() {
        let manifest = RunManifest::new(&RunConfig::default(), 5);
        let mut entries = manifest_entries(&manifest);
        assert_eq!(read_manifest(&entries).unwrap(), manifest);
        // Flip one byte of the stored manifest text.
        let tampered = entry_text(MANIFEST_ENTRY, &entries[0].1)
            .unwrap()
            .replace("root_seed=5", "root_seed=6");
        entries[0] = string_entry(MANIFEST_ENTRY, &tampered);
        assert!(matches!(read_manifest(&entries), Err(Error::Version(_))));
    }

    #[test]
    fn split_entries_round_trip() {
        let cfg = RunConfig::default();
        let split = cfg.generate_split(40, 9).unwrap();
        let entries = split_entries(&split);
        let back = read_split(&entries).unwrap();
        assert_eq!(back.name, split.name);
        assert_eq!(back.seed, split.seed);
        assert_eq!(back.classes, split.classes);
        assert_eq!(back.labels, split.labels);
        for (a, b) in split.inputs.data().iter().zip(back.inputs.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn batch_entries_round_trip_bitwise() {
        use crate::attack::{pgd, AttackSpec, Norm};
        use crate::tensor::nn::Mlp;
        let cfg = RunConfig::default();
        let split = cfg.generate_split(24, 10).unwrap();
        let model = Mlp::new(&[cfg.dim, 8, 2], &mut SplitMix64::new(4)).unwrap();
        let spec = AttackSpec::new(Norm::LInf, 0.1, 3, None, true).unwrap();
        let batch = pgd(&model, &split.inputs, &split.labels, &spec, 11).unwrap();
        let back = read_batch(&batch_entries(&batch)).unwrap();
        assert_eq!(back.labels(), batch.labels());
        for (a, b) in batch.adversarial().data().iter().zip(back.adversarial().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in batch.noise().data().iter().zip(back.noise().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
