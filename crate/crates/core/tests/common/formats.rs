//! Random valid instances of the binary formats and hand-corrupted variants.

use rand::Rng;
use style_evo::io::{
    Checkpoint, EmbeddingFile, EmbeddingRecord, FormatError, StyleBankFile, StyleBankRecord,
};
use style_evo::Tensor;

fn name(r: &mut impl Rng, i: usize) -> String {
    // a unique suffix plus some multi-byte characters
    let pool = ['a', 'z', '_', ' ', 'é', 'ß', '雨', '🌧'];
    let len = r.random_range(0..6);
    let head: String = (0..len)
        .map(|_| pool[r.random_range(0..pool.len())])
        .collect();
    format!("{head}#{i}")
}

/// Any bit pattern, NaNs and infinities included.
fn any_f32(r: &mut impl Rng) -> f32 {
    f32::from_bits(r.random())
}

pub fn embedding_file(r: &mut impl Rng) -> EmbeddingFile {
    let dim = r.random_range(0..12);
    let records = (0..r.random_range(0..6))
        .map(|i| EmbeddingRecord {
            name: name(r, i),
            values: (0..dim).map(|_| any_f32(r)).collect(),
        })
        .collect();
    EmbeddingFile::new(dim, records).unwrap()
}

pub fn style_bank(r: &mut impl Rng) -> StyleBankFile {
    let channels = r.random_range(0..10u32);
    let entries = (0..r.random_range(0..5))
        .map(|i| StyleBankRecord {
            provenance: name(r, i),
            mu: (0..channels).map(|_| any_f32(r)).collect(),
            sigma: (0..channels)
                .map(|_| {
                    let v = any_f32(r).abs();
                    if v > 0.0 {
                        v
                    } else {
                        f32::MIN_POSITIVE
                    }
                })
                .collect(),
        })
        .collect();
    StyleBankFile { channels, entries }
}

pub fn checkpoint(r: &mut impl Rng) -> Checkpoint {
    let params = (0..r.random_range(0..5))
        .map(|i| {
            let shape: Vec<usize> = (0..r.random_range(0..=4))
                .map(|_| r.random_range(0..4))
                .collect();
            let n = shape.iter().product();
            (
                name(r, i),
                Tensor::new(&shape, (0..n).map(|_| any_f32(r)).collect()).unwrap(),
            )
        })
        .collect();
    Checkpoint {
        meta: name(r, 99),
        params,
    }
}

/// Bitwise equality, so NaN payloads count.
pub fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn embedding_round_trips(f: &EmbeddingFile) -> bool {
    let back = EmbeddingFile::decode(&f.encode().unwrap()).unwrap();
    back.dim == f.dim
        && back.records.len() == f.records.len()
        && back
            .records
            .iter()
            .zip(&f.records)
            .all(|(a, b)| a.name == b.name && same_bits(&a.values, &b.values))
}

pub fn bank_round_trips(f: &StyleBankFile) -> bool {
    let back = StyleBankFile::decode(&f.encode().unwrap()).unwrap();
    back.channels == f.channels
        && back.entries.len() == f.entries.len()
        && back.entries.iter().zip(&f.entries).all(|(a, b)| {
            a.provenance == b.provenance && same_bits(&a.mu, &b.mu) && same_bits(&a.sigma, &b.sigma)
        })
}

pub fn checkpoint_round_trips(f: &Checkpoint) -> bool {
    let back = Checkpoint::decode(&f.encode().unwrap()).unwrap();
    back.meta == f.meta
        && back.params.len() == f.params.len()
        && back.params.iter().zip(&f.params).all(|(a, b)| {
            a.0 == b.0 && a.1.shape() == b.1.shape() && same_bits(a.1.data(), b.1.data())
        })
}

fn set_u32(bytes: &mut [u8], at: usize, v: u32) {
    bytes[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn two_embeddings() -> Vec<u8> {
    let rec = |n: &str| EmbeddingRecord {
        name: n.into(),
        values: vec![1.0, -2.0],
    };
    EmbeddingFile::new(2, vec![rec("ab"), rec("cd")])
        .unwrap()
        .encode()
        .unwrap()
}

fn one_style() -> Vec<u8> {
    StyleBankFile {
        channels: 2,
        entries: vec![StyleBankRecord {
            provenance: "p".into(),
            mu: vec![0.0, 1.0],
            sigma: vec![1.0, 2.0],
        }],
    }
    .encode()
    .unwrap()
}

/// One hand-made corruption per error class, each paired with whether the
/// decoder reported exactly that class at the right place.
pub fn corruption_classes() -> Vec<(&'static str, bool)> {
    let emb = two_embeddings();
    // header 16 bytes, then records of 2 + 2 + 8 = 12 bytes
    let mut out = Vec::new();

    let mut b = emb.clone();
    b[..4].copy_from_slice(b"XXXX");
    out.push((
        "bad magic",
        matches!(
            EmbeddingFile::decode(&b),
            Err(FormatError::BadMagic { offset: 0, .. })
        ),
    ));

    let mut b = emb.clone();
    set_u32(&mut b, 4, 7);
    out.push((
        "unsupported version",
        matches!(
            EmbeddingFile::decode(&b),
            Err(FormatError::UnsupportedVersion {
                offset: 4,
                version: 7
            })
        ),
    ));

    out.push((
        "truncated header",
        matches!(
            EmbeddingFile::decode(&emb[..10]),
            Err(FormatError::Truncated {
                offset: 8,
                record: None,
                ..
            })
        ),
    ));

    out.push((
        "truncated record",
        matches!(
            EmbeddingFile::decode(&emb[..28]),
            Err(FormatError::Truncated {
                record: Some(1),
                ..
            })
        ),
    ));

    let mut b = emb.clone();
    b[30..32].copy_from_slice(b"ab");
    out.push((
        "duplicate name",
        matches!(EmbeddingFile::decode(&b), Err(FormatError::DuplicateName { offset: 28, ref name }) if name == "ab"),
    ));

    let mut b = emb.clone();
    b[18] = 0xff;
    out.push((
        "invalid UTF-8",
        matches!(
            EmbeddingFile::decode(&b),
            Err(FormatError::InvalidUtf8 { offset: 18 })
        ),
    ));

    let mut b = emb.clone();
    b.extend_from_slice(&[0, 0, 0]);
    out.push((
        "trailing bytes",
        matches!(
            EmbeddingFile::decode(&b),
            Err(FormatError::TrailingBytes {
                offset: 40,
                count: 3
            })
        ),
    ));

    out.push((
        "dimension mismatch",
        matches!(
            EmbeddingFile::decode_expecting(&emb, 3),
            Err(FormatError::DimMismatch {
                expected: 3,
                found: 2,
                ..
            })
        ),
    ));

    // header 16, provenance 2 + 1, means 8, then the scales
    let mut b = one_style();
    b[27..31].copy_from_slice(&(-1.0f32).to_le_bytes());
    out.push((
        "non-positive sigma",
        matches!(
            StyleBankFile::decode(&b),
            Err(FormatError::NonPositiveSigma {
                offset: 27,
                entry: 0,
                channel: 0,
                ..
            })
        ),
    ));

    let mut b = one_style();
    b[31..35].copy_from_slice(&f32::NAN.to_le_bytes());
    out.push((
        "NaN sigma",
        matches!(
            StyleBankFile::decode(&b),
            Err(FormatError::NonPositiveSigma {
                entry: 0,
                channel: 1,
                ..
            })
        ),
    ));

    out.push((
        "bank channel mismatch",
        matches!(
            StyleBankFile::decode_expecting(&one_style(), 5),
            Err(FormatError::DimMismatch {
                offset: 8,
                expected: 5,
                found: 2
            })
        ),
    ));
    out
}
