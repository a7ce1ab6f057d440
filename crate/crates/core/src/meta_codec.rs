//! Metadata schemas and the numeric encoding of metadata records.
//!
//! A schema is an ordered list of entities. Categorical entities map each
//! label to a code (1-based declaration order unless the schema lists explicit
//! codes); continuous entities are divided by a per-entity `scale_divisor`.
//! Schemas are plain TOML files shipped under `schemas/`.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MMS2_SCHEMA: &str = include_str!("../../../schemas/mms2.toml");
const CAMUS_SCHEMA: &str = include_str!("../../../schemas/camus.toml");

/// Column holding the case identifier in metadata CSV files.
pub const CASE_ID_COLUMN: &str = "case_id";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Categorical,
    Continuous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetadataEntitySpec {
    pub name: String,
    pub kind: EntityKind,
    pub categories: Vec<String>,
    /// Code of `categories[i]`; empty for continuous entities.
    pub category_codes: Vec<f64>,
    /// 1.0 means the value is used directly.
    pub scale_divisor: f64,
}

impl MetadataEntitySpec {
    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: EntityKind::Categorical,
            categories: categories.iter().map(|c| c.to_string()).collect(),
            category_codes: (1..=categories.len()).map(|c| c as f64).collect(),
            scale_divisor: 1.0,
        }
    }

    pub fn continuous(name: &str, scale_divisor: f64) -> Self {
        Self {
            name: name.to_string(),
            kind: EntityKind::Continuous,
            categories: Vec::new(),
            category_codes: Vec::new(),
            scale_divisor,
        }
    }

    pub fn with_codes(mut self, codes: &[f64]) -> Self {
        self.category_codes = codes.to_vec();
        self
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == label)
    }

    /// Width of this entity's prediction head.
    pub fn arity(&self) -> usize {
        match self.kind {
            EntityKind::Categorical => self.categories.len(),
            EntityKind::Continuous => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name == CASE_ID_COLUMN {
            return Err(Error::Schema(format!("invalid entity name `{}`", self.name)));
        }
        match self.kind {
            EntityKind::Categorical => {
                if self.categories.is_empty() {
                    return Err(Error::Schema(format!("`{}` has no categories", self.name)));
                }
                if self.category_codes.len() != self.categories.len() {
                    return Err(Error::Schema(format!(
                        "`{}` lists {} categories but {} codes",
                        self.name,
                        self.categories.len(),
                        self.category_codes.len()
                    )));
                }
                let labels: HashSet<&str> = self.categories.iter().map(String::as_str).collect();
                if labels.len() != self.categories.len() {
                    return Err(Error::Schema(format!("`{}` repeats a category", self.name)));
                }
                for (i, a) in self.category_codes.iter().enumerate() {
                    if !a.is_finite() || self.category_codes[..i].contains(a) {
                        return Err(Error::Schema(format!("`{}` codes must be distinct finite reals", self.name)));
                    }
                }
            }
            EntityKind::Continuous => {
                if !(self.scale_divisor.is_finite() && self.scale_divisor > 0.0) {
                    return Err(Error::Schema(format!("`{}` needs a positive scale divisor", self.name)));
                }
                if !self.categories.is_empty() {
                    return Err(Error::Schema(format!("continuous `{}` lists categories", self.name)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RawEntity {
    name: String,
    kind: EntityKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    codes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale_divisor: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    dataset: String,
    #[serde(rename = "entity", default)]
    entities: Vec<RawEntity>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetadataSchema {
    pub dataset_name: String,
    pub entities: Vec<MetadataEntitySpec>,
}

impl MetadataSchema {
    pub fn new(dataset_name: &str, entities: Vec<MetadataEntitySpec>) -> Result<Self> {
        let schema = Self {
            dataset_name: dataset_name.to_string(),
            entities,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Schema shipped with the crate: `mms2` or `camus`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "mms2" => Self::from_toml_str(MMS2_SCHEMA),
            "camus" => Self::from_toml_str(CAMUS_SCHEMA),
            other => Err(Error::Schema(format!("no built-in schema `{other}`"))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawSchema = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut entities = Vec::with_capacity(raw.entities.len());
        for e in raw.entities {
            let spec = match e.kind {
                EntityKind::Categorical => {
                    let categories = e.categories.unwrap_or_default();
                    let codes = e
                        .codes
                        .unwrap_or_else(|| (1..=categories.len()).map(|c| c as f64).collect());
                    if e.scale_divisor.is_some() {
                        return Err(Error::Schema(format!("categorical `{}` has a scale divisor", e.name)));
                    }
                    MetadataEntitySpec {
                        name: e.name,
                        kind: EntityKind::Categorical,
                        categories,
                        category_codes: codes,
                        scale_divisor: 1.0,
                    }
                }
                EntityKind::Continuous => {
                    if e.codes.is_some() {
                        return Err(Error::Schema(format!("continuous `{}` lists codes", e.name)));
                    }
                    MetadataEntitySpec {
                        name: e.name,
                        kind: EntityKind::Continuous,
                        categories: e.categories.unwrap_or_default(),
                        category_codes: Vec::new(),
                        scale_divisor: e.scale_divisor.unwrap_or(1.0),
                    }
                }
            };
            entities.push(spec);
        }
        Self::new(&raw.dataset, entities)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let raw = RawSchema {
            dataset: self.dataset_name.clone(),
            entities: self
                .entities
                .iter()
                .map(|e| match e.kind {
                    EntityKind::Categorical => RawEntity {
                        name: e.name.clone(),
                        kind: e.kind,
                        categories: Some(e.categories.clone()),
                        codes: Some(e.category_codes.clone()),
                        scale_divisor: None,
                    },
                    EntityKind::Continuous => RawEntity {
                        name: e.name.clone(),
                        kind: e.kind,
                        categories: None,
                        codes: None,
                        scale_divisor: Some(e.scale_divisor),
                    },
                })
                .collect(),
        };
        toml::to_string(&raw).expect("schema serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entities {
            e.validate()?;
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Schema(format!("duplicate entity `{}`", e.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entity(&self, name: &str) -> Option<&MetadataEntitySpec> {
        self.entities.iter().find(|e| e.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entities.iter().position(|e| e.name == name)
    }

    pub fn head_arities(&self) -> Vec<usize> {
        self.entities.iter().map(MetadataEntitySpec::arity).collect()
    }

    /// Copy of the schema with one entity removed.
    pub fn without(&self, name: &str) -> Result<Self> {
        if self.entity(name).is_none() {
            return Err(Error::Schema(format!("no entity `{name}` to remove")));
        }
        Self::new(
            &self.dataset_name,
            self.entities.iter().filter(|e| e.name != name).cloned().collect(),
        )
    }
}

/// One metadata value. `Absent` marks an entity that is unknown for this case.
#[derive(Clone, Debug, PartialEq)]
pub enum MetaValue {
    Label(String),
    Number(f64),
    Absent,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetadataRecord {
    pub values: BTreeMap<String, MetaValue>,
}

impl MetadataRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_label(mut self, name: &str, label: &str) -> Self {
        self.values.insert(name.to_string(), MetaValue::Label(label.to_string()));
        self
    }

    pub fn with_number(mut self, name: &str, value: f64) -> Self {
        self.values.insert(name.to_string(), MetaValue::Number(value));
        self
    }

    pub fn with_absent(mut self, name: &str) -> Self {
        self.values.insert(name.to_string(), MetaValue::Absent);
        self
    }

    pub fn get(&self, name: &str) -> Option<&MetaValue> {
        self.values.get(name)
    }

    pub fn label(&self, name: &str) -> Option<&str> {
        match self.values.get(name) {
            Some(MetaValue::Label(l)) => Some(l),
            _ => None,
        }
    }

    pub fn number(&self, name: &str) -> Option<f64> {
        match self.values.get(name) {
            Some(MetaValue::Number(v)) => Some(*v),
            _ => None,
        }
    }

    /// Entities that are listed as absent or not listed at all.
    pub fn missing_entities(&self, schema: &MetadataSchema) -> Vec<String> {
        schema
            .entities
            .iter()
            .filter(|e| matches!(self.values.get(&e.name), None | Some(MetaValue::Absent)))
            .map(|e| e.name.clone())
            .collect()
    }

    /// Keep only the entities declared by `schema`.
    pub fn project(&self, schema: &MetadataSchema) -> Self {
        Self {
            values: self
                .values
                .iter()
                .filter(|(k, _)| schema.entity(k).is_some())
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

fn check_keys(record: &MetadataRecord, schema: &MetadataSchema) -> Result<()> {
    for key in record.values.keys() {
        if schema.entity(key).is_none() {
            return Err(Error::Schema(format!(
                "entity `{key}` is not declared by schema `{}`",
                schema.dataset_name
            )));
        }
    }
    Ok(())
}

/// Numeric vector for `record`, one position per schema entity.
pub fn encode_metadata(record: &MetadataRecord, schema: &MetadataSchema) -> Result<Vec<f64>> {
    check_keys(record, schema)?;
    schema
        .entities
        .iter()
        .map(|e| match (e.kind, record.values.get(&e.name)) {
            (_, None | Some(MetaValue::Absent)) => Err(Error::MissingMetadata(e.name.clone())),
            (EntityKind::Categorical, Some(MetaValue::Label(l))) => e
                .class_index(l)
                .map(|i| e.category_codes[i])
                .ok_or_else(|| Error::Encoding(format!("`{l}` is not a category of `{}`", e.name))),
            (EntityKind::Categorical, Some(MetaValue::Number(v))) => Err(Error::Encoding(format!(
                "categorical `{}` expects a label, got {v}",
                e.name
            ))),
            (EntityKind::Continuous, Some(MetaValue::Number(v))) => {
                if v.is_finite() {
                    Ok(v / e.scale_divisor)
                } else {
                    Err(Error::Encoding(format!("`{}` is not finite", e.name)))
                }
            }
            (EntityKind::Continuous, Some(MetaValue::Label(l))) => Err(Error::Encoding(format!(
                "continuous `{}` expects a number, got `{l}`",
                e.name
            ))),
        })
        .collect()
}

/// Supervision target of one entity head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EntityTarget {
    Class(usize),
    /// Encoded (divided) value.
    Value(f64),
}

/// Per-entity supervision targets for the metadata heads.
pub fn entity_targets(record: &MetadataRecord, schema: &MetadataSchema) -> Result<Vec<EntityTarget>> {
    let encoded = encode_metadata(record, schema)?;
    Ok(schema
        .entities
        .iter()
        .zip(encoded)
        .map(|(e, v)| match e.kind {
            EntityKind::Categorical => {
                EntityTarget::Class(e.category_codes.iter().position(|c| *c == v).expect("encoded code"))
            }
            EntityKind::Continuous => EntityTarget::Value(v),
        })
        .collect())
}

/// Turn raw head outputs back into a record: argmax label (lowest index wins
/// ties) for categorical entities, rescaled value for continuous ones.
pub fn decode_head_outputs(outputs: &[Vec<f64>], schema: &MetadataSchema) -> Result<MetadataRecord> {
    if outputs.len() != schema.len() {
        return Err(Error::Decoding(format!(
            "{} head outputs for {} entities",
            outputs.len(),
            schema.len()
        )));
    }
    let mut record = MetadataRecord::new();
    for (e, out) in schema.entities.iter().zip(outputs) {
        if out.len() != e.arity() {
            return Err(Error::Decoding(format!(
                "`{}` expects {} outputs, got {}",
                e.name,
                e.arity(),
                out.len()
            )));
        }
        match e.kind {
            EntityKind::Categorical => {
                let mut best = 0;
                for (i, v) in out.iter().enumerate() {
                    if *v > out[best] {
                        best = i;
                    }
                }
                record = record.with_label(&e.name, &e.categories[best]);
            }
            EntityKind::Continuous => record = record.with_number(&e.name, out[0] * e.scale_divisor),
        }
    }
    Ok(record)
}

fn parse_cell(entity: &MetadataEntitySpec, cell: &str) -> Result<MetaValue> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(MetaValue::Absent);
    }
    match entity.kind {
        EntityKind::Categorical => Ok(MetaValue::Label(cell.to_string())),
        EntityKind::Continuous => cell
            .parse::<f64>()
            .map(MetaValue::Number)
            .map_err(|_| Error::Encoding(format!("`{cell}` is not a number for `{}`", entity.name))),
    }
}

/// Read metadata records from CSV. Column names must be schema entities,
/// optionally plus a `case_id` column. Empty cells become [`MetaValue::Absent`].
pub fn read_records_csv<R: Read>(reader: R, schema: &MetadataSchema) -> Result<Vec<(Option<String>, MetadataRecord)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut columns = Vec::with_capacity(headers.len());
    for h in headers.iter() {
        if h == CASE_ID_COLUMN {
            columns.push(None);
        } else {
            let e = schema
                .entity(h)
                .ok_or_else(|| Error::Schema(format!("column `{h}` is not a schema entity")))?;
            columns.push(Some(e));
        }
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let mut id = None;
        let mut record = MetadataRecord::new();
        for (col, cell) in columns.iter().zip(row.iter()) {
            match col {
                None => id = Some(cell.to_string()),
                Some(e) => {
                    record.values.insert(e.name.clone(), parse_cell(e, cell)?);
                }
            }
        }
        out.push((id, record));
    }
    Ok(out)
}

pub fn write_records_csv<W: Write>(writer: W, schema: &MetadataSchema, rows: &[(String, MetadataRecord)]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![CASE_ID_COLUMN.to_string()];
    header.extend(schema.entities.iter().map(|e| e.name.clone()));
    wtr.write_record(&header)?;
    for (id, record) in rows {
        let mut line = vec![id.clone()];
        for e in &schema.entities {
            line.push(match record.get(&e.name) {
                Some(MetaValue::Label(l)) => l.clone(),
                Some(MetaValue::Number(v)) => format!("{v}"),
                Some(MetaValue::Absent) | None => String::new(),
            });
        }
        wtr.write_record(&line)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mms2() -> MetadataSchema {
        MetadataSchema::builtin("mms2").unwrap()
    }

    fn camus() -> MetadataSchema {
        MetadataSchema::builtin("camus").unwrap()
    }

    #[test]
    fn vendor_codes_follow_declaration_order() {
        let schema = MetadataSchema::new("v", vec![mms2().entity("vendor").unwrap().clone()]).unwrap();
        let r = MetadataRecord::new().with_label("vendor", "Philips");
        assert_eq!(encode_metadata(&r, &schema).unwrap(), vec![1.0]);
        let r = MetadataRecord::new().with_label("vendor", "GE");
        assert_eq!(encode_metadata(&r, &schema).unwrap(), vec![3.0]);
    }

    #[test]
    fn field_strength_used_directly() {
        let schema = MetadataSchema::new("f", vec![mms2().entity("field_strength").unwrap().clone()]).unwrap();
        let r = MetadataRecord::new().with_number("field_strength", 1.5);
        assert_eq!(encode_metadata(&r, &schema).unwrap(), vec![1.5]);
    }

    #[test]
    fn camus_continuous_divided_by_ten() {
        let schema = MetadataSchema::new("a", vec![camus().entity("age").unwrap().clone()]).unwrap();
        let r = MetadataRecord::new().with_number("age", 60.0);
        assert_eq!(encode_metadata(&r, &schema).unwrap(), vec![6.0]);
    }

    #[test]
    fn camus_sex_and_quality_are_zero_based() {
        let c = camus();
        let schema = MetadataSchema::new(
            "sq",
            vec![c.entity("sex").unwrap().clone(), c.entity("image_quality").unwrap().clone()],
        )
        .unwrap();
        let r = MetadataRecord::new()
            .with_label("sex", "Female")
            .with_label("image_quality", "Poor");
        assert_eq!(encode_metadata(&r, &schema).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn encoding_errors() {
        let s = mms2();
        let full = MetadataRecord::new()
            .with_label("vendor", "GE")
            .with_label("scanner", "SignaHDxt")
            .with_number("field_strength", 3.0)
            .with_label("disease", "NOR");
        assert_eq!(encode_metadata(&full, &s).unwrap(), vec![3.0, 9.0, 3.0, 1.0]);
        let unknown = full.clone().with_label("height", "tall");
        assert!(matches!(encode_metadata(&unknown, &s), Err(Error::Schema(_))));
        let bad_label = full.clone().with_label("vendor", "Canon");
        assert!(matches!(encode_metadata(&bad_label, &s), Err(Error::Encoding(_))));
        let nan = full.clone().with_number("field_strength", f64::NAN);
        assert!(matches!(encode_metadata(&nan, &s), Err(Error::Encoding(_))));
        let absent = full.with_absent("vendor");
        assert!(matches!(encode_metadata(&absent, &s), Err(Error::MissingMetadata(v)) if v == "vendor"));
    }

    #[test]
    fn decode_examples() {
        let s = MetadataSchema::new(
            "d",
            vec![
                mms2().entity("vendor").unwrap().clone(),
                camus().entity("age").unwrap().clone(),
                camus().entity("sex").unwrap().clone(),
            ],
        )
        .unwrap();
        let r = decode_head_outputs(&[vec![0.1, 2.0, 0.3], vec![6.0], vec![0.0, 0.0]], &s).unwrap();
        assert_eq!(r.label("vendor"), Some("Siemens"));
        assert_eq!(r.number("age"), Some(60.0));
        assert_eq!(r.label("sex"), Some("Male"));
        assert!(matches!(decode_head_outputs(&[vec![0.0; 3]], &s), Err(Error::Decoding(_))));
        assert!(matches!(
            decode_head_outputs(&[vec![0.0; 2], vec![1.0], vec![0.0; 2]], &s),
            Err(Error::Decoding(_))
        ));
    }

    #[test]
    fn schema_validation() {
        let dup = MetadataSchema::new(
            "x",
            vec![
                MetadataEntitySpec::continuous("a", 1.0),
                MetadataEntitySpec::continuous("a", 2.0),
            ],
        );
        assert!(dup.is_err());
        assert!(MetadataSchema::new("x", vec![MetadataEntitySpec::continuous("a", 0.0)]).is_err());
        assert!(MetadataSchema::new("x", vec![MetadataEntitySpec::categorical("a", &[])]).is_err());
        let same_codes = MetadataEntitySpec::categorical("a", &["p", "q"]).with_codes(&[1.0, 1.0]);
        assert!(MetadataSchema::new("x", vec![same_codes]).is_err());
    }

    #[test]
    fn toml_round_trip_preserves_schema_and_fingerprint() {
        for s in [mms2(), camus()] {
            let back = MetadataSchema::from_toml_str(&s.to_toml_string()).unwrap();
            assert_eq!(back, s);
            assert_eq!(back.fingerprint(), s.fingerprint());
        }
        assert_ne!(mms2().fingerprint(), camus().fingerprint());
        assert_ne!(mms2().fingerprint(), mms2().without("disease").unwrap().fingerprint());
    }

    #[test]
    fn csv_round_trip_with_absent_marker() {
        let s = mms2();
        let rows = vec![
            (
                "c1".to_string(),
                MetadataRecord::new()
                    .with_label("vendor", "Siemens")
                    .with_label("scanner", "Avanto")
                    .with_number("field_strength", 1.5)
                    .with_label("disease", "HCM"),
            ),
            (
                "c2".to_string(),
                MetadataRecord::new()
                    .with_absent("vendor")
                    .with_label("scanner", "Achieva")
                    .with_number("field_strength", 3.0)
                    .with_label("disease", "NOR"),
            ),
        ];
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &s, &rows).unwrap();
        let back = read_records_csv(buf.as_slice(), &s).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0.as_deref(), Some("c1"));
        assert_eq!(back[0].1, rows[0].1);
        assert_eq!(back[1].1.get("vendor"), Some(&MetaValue::Absent));
        assert_eq!(back[1].1.missing_entities(&s), vec!["vendor".to_string()]);
    }

    #[test]
    fn csv_rejects_unknown_column() {
        let csv = "case_id,vendor,colour\nc1,GE,red\n";
        assert!(matches!(read_records_csv(csv.as_bytes(), &mms2()), Err(Error::Schema(_))));
    }

    fn arb_record(schema: MetadataSchema) -> impl Strategy<Value = MetadataRecord> {
        let parts: Vec<BoxedStrategy<(String, MetaValue)>> = schema
            .entities
            .into_iter()
            .map(|e| {
                let name = e.name.clone();
                match e.kind {
                    EntityKind::Categorical => (0..e.categories.len())
                        .prop_map(move |i| (name.clone(), MetaValue::Label(e.categories[i].clone())))
                        .boxed(),
                    EntityKind::Continuous => (-500.0f64..500.0)
                        .prop_map(move |v| (name.clone(), MetaValue::Number(v)))
                        .boxed(),
                }
            })
            .collect();
        parts.prop_map(|kv| MetadataRecord {
            values: kv.into_iter().collect(),
        })
    }

    fn one_hot_outputs(record: &MetadataRecord, schema: &MetadataSchema) -> Vec<Vec<f64>> {
        let encoded = encode_metadata(record, schema).unwrap();
        schema
            .entities
            .iter()
            .zip(encoded)
            .map(|(e, v)| match e.kind {
                EntityKind::Categorical => e
                    .category_codes
                    .iter()
                    .map(|c| if *c == v { 1.0 } else { 0.0 })
                    .collect(),
                EntityKind::Continuous => vec![v],
            })
            .collect()
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(record in arb_record(camus())) {
            let s = camus();
            let decoded = decode_head_outputs(&one_hot_outputs(&record, &s), &s).unwrap();
            for e in &s.entities {
                match e.kind {
                    EntityKind::Categorical => prop_assert_eq!(decoded.label(&e.name), record.label(&e.name)),
                    EntityKind::Continuous => {
                        let (a, b) = (decoded.number(&e.name).unwrap(), record.number(&e.name).unwrap());
                        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
                    }
                }
            }
        }

        #[test]
        fn categorical_encoding_is_injective(a in arb_record(mms2()), b in arb_record(mms2())) {
            let s = mms2();
            let (ea, eb) = (encode_metadata(&a, &s).unwrap(), encode_metadata(&b, &s).unwrap());
            prop_assert_eq!(ea.len(), s.len());
            let same_labels = s.entities.iter()
                .filter(|e| e.kind == EntityKind::Categorical)
                .all(|e| a.label(&e.name) == b.label(&e.name));
            let same_codes = s.entities.iter().enumerate()
                .filter(|(_, e)| e.kind == EntityKind::Categorical)
                .all(|(i, _)| ea[i] == eb[i]);
            prop_assert_eq!(same_labels, same_codes);
        }
    }
}
