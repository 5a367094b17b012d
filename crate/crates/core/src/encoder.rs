//! Listing features, the encoder network that turns them into demand
//! embeddings, and the `DEV v1` embedding file.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec};

/// Default embedding width.
pub const DEFAULT_EMBEDDING_DIM: usize = 64;
/// Default encoder hidden width.
pub const DEFAULT_ENCODER_HIDDEN: usize = 128;

/// Number of standardized numeric slots at the front of a feature vector.
pub const NUMERIC_FEATURES: usize = 8;

/// Names of the numeric slots, in vector order.
pub const NUMERIC_FEATURE_NAMES: [&str; NUMERIC_FEATURES] = [
    "log_mileage",
    "log_horsepower",
    "age",
    "automatic",
    "cylinders",
    "sale_time",
    "brand_prestige",
    "brand_sportiness",
];

/// Structured description of one listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListingFeatures {
    pub mileage: f64,
    pub horsepower: f64,
    /// Vehicle age in years at the time of sale.
    pub age: f64,
    pub automatic: bool,
    pub cylinders: u32,
    pub brand: String,
    pub body_style: String,
    /// Descriptive brand attributes in `[0, 1]`, as a listing text would convey them.
    pub brand_prestige: f64,
    pub brand_sportiness: f64,
    /// Normalized sale date in `[0, 1]`.
    pub sale_time: f64,
    pub sale_year: u32,
}

impl ListingFeatures {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            self.mileage,
            self.horsepower,
            self.age,
            self.brand_prestige,
            self.brand_sportiness,
            self.sale_time,
        ];
        if reals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("listing features must be finite".into()));
        }
        if self.mileage < 0.0 || self.horsepower <= 0.0 || self.age < 0.0 {
            return Err(Error::Domain(format!(
                "mileage {}, horsepower {}, age {} out of range",
                self.mileage, self.horsepower, self.age
            )));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.sale_time) || !unit(self.brand_prestige) || !unit(self.brand_sportiness) {
            return Err(Error::Domain(
                "sale_time and brand descriptors must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn log_mileage(&self) -> f64 {
        self.mileage.ln_1p()
    }

    pub fn log_horsepower(&self) -> f64 {
        self.horsepower.ln()
    }

    fn numeric(&self) -> [f64; NUMERIC_FEATURES] {
        [
            self.log_mileage(),
            self.log_horsepower(),
            self.age,
            self.automatic as u8 as f64,
            self.cylinders as f64,
            self.sale_time,
            self.brand_prestige,
            self.brand_sportiness,
        ]
    }
}

/// Standardization constants and category levels that turn features into a
/// fixed-length vector. Categories unseen when the schema was fitted encode
/// as an all-zero block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub brands: Vec<String>,
    pub body_styles: Vec<String>,
}

impl FeatureSchema {
    pub fn fit<'a, I>(features: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ListingFeatures>,
    {
        let mut sum = [0.0; NUMERIC_FEATURES];
        let mut sq = [0.0; NUMERIC_FEATURES];
        let mut n = 0usize;
        let mut brands = std::collections::BTreeSet::new();
        let mut bodies = std::collections::BTreeSet::new();
        for f in features {
            f.validate()?;
            for (k, v) in f.numeric().iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
            brands.insert(f.brand.clone());
            bodies.insert(f.body_style.clone());
            n += 1;
        }
        if n == 0 {
            return Err(Error::Data("cannot fit a feature schema on zero listings".into()));
        }
        let nf = n as f64;
        let center: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sq
            .iter()
            .zip(&center)
            .map(|(s, m)| {
                let sd = (s / nf - m * m).max(0.0).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureSchema {
            center,
            scale,
            brands: brands.into_iter().collect(),
            body_styles: bodies.into_iter().collect(),
        })
    }

    pub fn dim(&self) -> usize {
        NUMERIC_FEATURES + self.brands.len() + self.body_styles.len()
    }

    /// Human-readable name of every vector slot.
    pub fn labels(&self) -> Vec<String> {
        NUMERIC_FEATURE_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(self.brands.iter().map(|b| format!("brand={b}")))
            .chain(self.body_styles.iter().map(|b| format!("body={b}")))
            .collect()
    }

    pub fn vectorize(&self, f: &ListingFeatures) -> Result<Vec<f64>> {
        f.validate()?;
        let mut out = Vec::with_capacity(self.dim());
        for ((v, c), s) in f.numeric().iter().zip(&self.center).zip(&self.scale) {
            out.push((v - c) / s);
        }
        out.extend(self.brands.iter().map(|b| (*b == f.brand) as u8 as f64));
        out.extend(self.body_styles.iter().map(|b| (*b == f.body_style) as u8 as f64));
        Ok(out)
    }
}

/// A demand embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("embedding must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("embedding entry {i} is not finite")));
        }
        Ok(Embedding { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Encoder architecture `input -> hidden -> q`, LayerNorm + SiLU on both layers.
pub fn encoder_spec(input_dim: usize, hidden: usize, q: usize) -> Result<NetworkSpec> {
    NetworkSpec::trunk(&[input_dim, hidden, q])
}

pub fn init_encoder<R: Rng + ?Sized>(input_dim: usize, hidden: usize, q: usize, rng: &mut R) -> Result<Network> {
    Network::init(encoder_spec(input_dim, hidden, q)?, rng)
}

/// Forward pass of the encoder on an already vectorized listing.
pub fn encode_vector(encoder: &Network, x: &[f64]) -> Result<Embedding> {
    Embedding::new(encoder.output(x)?)
}

pub fn encode(encoder: &Network, schema: &FeatureSchema, f: &ListingFeatures) -> Result<Embedding> {
    if encoder.spec().input_dim() != schema.dim() {
        return Err(Error::dim(schema.dim(), encoder.spec().input_dim(), "encoder input"));
    }
    encode_vector(encoder, &schema.vectorize(f)?)
}

/// Anything that can hand Stage 2 an embedding for a listing.
pub trait EmbeddingSource {
    fn dim(&self) -> usize;
    fn embedding(&self, listing_id: &str, features: &ListingFeatures) -> Result<Embedding>;
}

/// Embeddings computed on demand from a trained encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderSource<'a> {
    pub encoder: &'a Network,
    pub schema: &'a FeatureSchema,
}

impl EmbeddingSource for EncoderSource<'_> {
    fn dim(&self) -> usize {
        self.encoder.spec().output_dim()
    }

    fn embedding(&self, _listing_id: &str, features: &ListingFeatures) -> Result<Embedding> {
        encode(self.encoder, self.schema, features)
    }
}

/// Precomputed embeddings keyed by listing id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    dim: usize,
    rows: BTreeMap<String, Embedding>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: &str, e: Embedding) -> Result<()> {
        validate_id(id)?;
        if e.dim() != self.dim {
            return Err(Error::dim(self.dim, e.dim(), "embedding"));
        }
        if self.rows.contains_key(id) {
            return Err(Error::Data(format!("duplicate listing id {id:?}")));
        }
        self.rows.insert(id.to_string(), e);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.rows.get(id)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Embedding)> {
        self.rows.iter()
    }

    pub fn into_map(self) -> HashMap<String, Embedding> {
        self.rows.into_iter().collect()
    }
}

impl EmbeddingSource for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embedding(&self, listing_id: &str, _features: &ListingFeatures) -> Result<Embedding> {
        self.rows
            .get(listing_id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no embedding for listing {listing_id:?}")))
    }
}

fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(Error::Data(format!("listing id {id:?} is empty or contains whitespace")));
    }
    Ok(())
}

const DEV_MAGIC: &str = "DEV";
const DEV_VERSION: &str = "v1";

/// Serializes a table in the `DEV v1` format. Floats are written in their
/// shortest round-trip form, so reading back is lossless.
pub fn format_embeddings(table: &EmbeddingTable) -> String {
    let mut out = format!("{DEV_MAGIC} {DEV_VERSION} {} {}\n", table.len(), table.dim);
    for (id, e) in table.iter() {
        out.push_str(id);
        out.push('\t');
        for (i, v) in e.values().iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_embeddings(text: &str) -> Result<EmbeddingTable> {
    let fail = |line: usize, message: String| Error::Format { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines
        .next()
        .ok_or_else(|| fail(1, "missing DEV header".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != DEV_MAGIC || parts[1] != DEV_VERSION {
        return Err(fail(1, format!("expected `DEV v1 <count> <q>`, got {header:?}")));
    }
    let count: usize = parts[2]
        .parse()
        .map_err(|_| fail(1, format!("bad record count {:?}", parts[2])))?;
    let dim: usize = parts[3]
        .parse()
        .map_err(|_| fail(1, format!("bad dimension {:?}", parts[3])))?;
    if dim == 0 {
        return Err(fail(1, "dimension must be positive".into()));
    }
    let mut table = EmbeddingTable::new(dim);
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| fail(lineno, "expected `<id>\\t<values>`".into()))?;
        validate_id(id).map_err(|e| fail(lineno, e.to_string()))?;
        let values = rest
            .split(' ')
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| fail(lineno, format!("bad value {tok:?} for {id:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(fail(
                lineno,
                format!("{id:?} has {} values, header declares {dim}", values.len()),
            ));
        }
        let e = Embedding::new(values).map_err(|e| fail(lineno, format!("{id:?}: {e}")))?;
        if table.rows.contains_key(id) {
            return Err(fail(lineno, format!("duplicate listing id {id:?}")));
        }
        table.rows.insert(id.to_string(), e);
    }
    if table.len() != count {
        return Err(fail(
            text.lines().count().max(1),
            format!("header declares {count} records, found {}", table.len()),
        ));
    }
    Ok(table)
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    std::fs::write(path, format_embeddings(table))?;
    Ok(())
}

pub fn load_external_embeddings(path: &Path) -> Result<EmbeddingTable> {
    parse_embeddings(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn features(mileage: f64, brand: &str) -> ListingFeatures {
        ListingFeatures {
            mileage,
            horsepower: 300.0,
            age: 25.0,
            automatic: false,
            cylinders: 6,
            brand: brand.into(),
            body_style: "coupe".into(),
            brand_prestige: 0.6,
            brand_sportiness: 0.7,
            sale_time: 0.5,
            sale_year: 2019,
        }
    }

    fn schema() -> FeatureSchema {
        let fs = [
            features(10_000.0, "porsche"),
            features(80_000.0, "ford"),
            ListingFeatures {
                body_style: "sedan".into(),
                automatic: true,
                ..features(40_000.0, "bmw")
            },
        ];
        FeatureSchema::fit(&fs).unwrap()
    }

    #[test]
    fn schema_layout() {
        let s = schema();
        assert_eq!(s.dim(), NUMERIC_FEATURES + 3 + 2);
        assert_eq!(s.labels().len(), s.dim());
        let v = s.vectorize(&features(10_000.0, "ford")).unwrap();
        assert_eq!(&v[NUMERIC_FEATURES..], &[0.0, 1.0, 0.0, 1.0, 0.0]);
        // Constant columns keep unit scale and map to zero.
        assert_eq!(v[2], 0.0);
        let unseen = s.vectorize(&features(10_000.0, "dmc")).unwrap();
        assert_eq!(&unseen[NUMERIC_FEATURES..NUMERIC_FEATURES + 3], &[0.0; 3]);
        assert!(s.vectorize(&features(-1.0, "ford")).is_err());
    }

    #[test]
    fn encoding_is_deterministic_and_zero_encoder_gives_zero() {
        let s = schema();
        let enc = init_encoder(s.dim(), 16, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let f = features(30_000.0, "bmw");
        let a = encode(&enc, &s, &f).unwrap();
        let b = encode(&enc, &s, &f.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 8);
        let other = encode(&enc, &s, &features(90_000.0, "bmw")).unwrap();
        let dist: f64 = a.values().iter().zip(other.values()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(dist > 0.0);
        let zero = Network::zeros(encoder_spec(s.dim(), 16, 8).unwrap()).unwrap();
        assert!(encode(&zero, &s, &f).unwrap().values().iter().all(|v| *v == 0.0));
        let wrong = init_encoder(3, 4, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(encode(&wrong, &s, &f).is_err());
    }

    #[test]
    fn empty_dev_file() {
        let t = parse_embeddings("DEV v1 0 64\n").unwrap();
        assert!(t.is_empty());
        assert_eq!(t.dim(), 64);
    }

    #[test]
    fn dev_rejections() {
        let cases = [
            ("", "missing"),
            ("DEV v2 0 3\n", "version"),
            ("DEV v1 1 3\na\t1 2\n", "q mismatch"),
            ("DEV v1 1 2\na\t1 2 3\n", "q mismatch"),
            ("DEV v1 2 2\na\t1 2\na\t3 4\n", "duplicate"),
            ("DEV v1 2 2\na\t1 2\n", "count"),
            ("DEV v1 1 2\na\t1 NaN\n", "nan"),
            ("DEV v1 1 2\na 1 2\n", "tab"),
            ("DEV v1 1 2\na\t1 x\n", "parse"),
        ];
        for (text, what) in cases {
            assert!(
                matches!(parse_embeddings(text), Err(Error::Format { .. })),
                "{what}: {text:?}"
            );
        }
        match parse_embeddings("DEV v1 2 2\na\t1 2\nb\t1\n") {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn table_source_lookup() {
        let mut t = EmbeddingTable::new(2);
        t.insert("x", Embedding::new(vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(t.insert("x", Embedding::new(vec![1.0, 2.0]).unwrap()).is_err());
        assert!(t.insert("y", Embedding::new(vec![1.0]).unwrap()).is_err());
        assert!(t.insert("a b", Embedding::new(vec![1.0, 2.0]).unwrap()).is_err());
        let f = features(1.0, "ford");
        assert_eq!(t.embedding("x", &f).unwrap().values(), &[1.0, 2.0]);
        assert!(matches!(t.embedding("z", &f), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn dev_round_trip_is_lossless(
            rows in proptest::collection::vec(proptest::collection::vec(-1e300f64..1e300, 5), 0..20)
        ) {
            let mut t = EmbeddingTable::new(5);
            for (i, r) in rows.iter().enumerate() {
                t.insert(&format!("id-{i}"), Embedding::new(r.clone()).unwrap()).unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("e.dev");
            write_embeddings(&path, &t).unwrap();
            let back = load_external_embeddings(&path).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
