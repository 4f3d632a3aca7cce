//! Feature schema: column roles, cardinalities, and the JSON descriptor.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EcupError, Result};

/// Role of one column in a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role")]
pub enum FieldRole {
    Dense,
    Sparse { cardinality: usize },
    Treatment { cardinality: usize },
    LabelClick,
    LabelConversion,
}

/// One named column together with its role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    #[serde(flatten)]
    pub role: FieldRole,
}

/// Ordered column declaration for a dataset.
///
/// Exactly one treatment column, one click label, and one conversion label
/// must be present; at least one dense or sparse feature field is required.
/// `treatment_count` is the number of non-control treatments K, so the
/// treatment column's cardinality is K + 1 with control coded 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub treatment_count: usize,
    pub fields: Vec<FieldSpec>,
}

impl FeatureSchema {
    pub fn new(fields: Vec<FieldSpec>, treatment_count: usize) -> Result<Self> {
        let schema = FeatureSchema {
            treatment_count,
            fields,
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        let mut treatments = 0;
        let mut clicks = 0;
        let mut conversions = 0;
        let mut features = 0;
        let mut seen = std::collections::HashSet::new();
        for f in &self.fields {
            if !seen.insert(&f.name) {
                return Err(EcupError::InvalidSpec(format!(
                    "duplicate field name `{}`",
                    f.name
                )));
            }
            match f.role {
                FieldRole::Dense => features += 1,
                FieldRole::Sparse { cardinality } => {
                    if cardinality < 1 {
                        return Err(EcupError::InvalidSpec(format!(
                            "sparse field `{}` must have cardinality >= 1",
                            f.name
                        )));
                    }
                    features += 1;
                }
                FieldRole::Treatment { cardinality } => {
                    treatments += 1;
                    if cardinality != self.treatment_count + 1 {
                        return Err(EcupError::InvalidSpec(format!(
                            "treatment cardinality {} must equal K + 1 = {}",
                            cardinality,
                            self.treatment_count + 1
                        )));
                    }
                }
                FieldRole::LabelClick => clicks += 1,
                FieldRole::LabelConversion => conversions += 1,
            }
        }
        if treatments != 1 || clicks != 1 || conversions != 1 {
            return Err(EcupError::InvalidSpec(format!(
                "need exactly one treatment / click label / conversion label field, got {}/{}/{}",
                treatments, clicks, conversions
            )));
        }
        if features < 1 {
            return Err(EcupError::InvalidSpec(
                "need at least one dense or sparse feature field".into(),
            ));
        }
        if self.treatment_count < 1 {
            return Err(EcupError::InvalidSpec(
                "treatment_count K must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Number of non-treatment feature fields (dense + sparse), in order.
    pub fn feature_count(&self) -> usize {
        self.fields
            .iter()
            .filter(|f| matches!(f.role, FieldRole::Dense | FieldRole::Sparse { .. }))
            .count()
    }

    pub fn dense_fields(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields
            .iter()
            .filter(|f| matches!(f.role, FieldRole::Dense))
    }

    pub fn sparse_fields(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields
            .iter()
            .filter(|f| matches!(f.role, FieldRole::Sparse { .. }))
    }

    /// Feature fields (dense + sparse) in declaration order.
    pub fn feature_fields(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields
            .iter()
            .filter(|f| matches!(f.role, FieldRole::Dense | FieldRole::Sparse { .. }))
    }

    pub fn treatment_field(&self) -> &FieldSpec {
        self.fields
            .iter()
            .find(|f| matches!(f.role, FieldRole::Treatment { .. }))
            .expect("validated schema has a treatment field")
    }

    pub fn click_field(&self) -> &FieldSpec {
        self.fields
            .iter()
            .find(|f| matches!(f.role, FieldRole::LabelClick))
            .expect("validated schema has a click label field")
    }

    pub fn conversion_field(&self) -> &FieldSpec {
        self.fields
            .iter()
            .find(|f| matches!(f.role, FieldRole::LabelConversion))
            .expect("validated schema has a conversion label field")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: FeatureSchema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON descriptor; embedded in checkpoints to
    /// refuse evaluation against mismatched data.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("schema serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{:02x}", b)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_schema() -> FeatureSchema {
        FeatureSchema::new(
            vec![
                FieldSpec {
                    name: "x0".into(),
                    role: FieldRole::Dense,
                },
                FieldSpec {
                    name: "c0".into(),
                    role: FieldRole::Sparse { cardinality: 3 },
                },
                FieldSpec {
                    name: "t".into(),
                    role: FieldRole::Treatment { cardinality: 2 },
                },
                FieldSpec {
                    name: "y".into(),
                    role: FieldRole::LabelClick,
                },
                FieldSpec {
                    name: "z".into(),
                    role: FieldRole::LabelConversion,
                },
            ],
            1,
        )
        .unwrap()
    }

    #[test]
    fn json_descriptor_roundtrips() {
        let schema = toy_schema();
        let json = schema.to_json().unwrap();
        let back = FeatureSchema::from_json(&json).unwrap();
        assert_eq!(schema, back);
        assert_eq!(schema.fingerprint(), back.fingerprint());
    }

    #[test]
    fn role_counts_are_enforced() {
        // No feature fields.
        let err = FeatureSchema::new(
            vec![
                FieldSpec {
                    name: "t".into(),
                    role: FieldRole::Treatment { cardinality: 2 },
                },
                FieldSpec {
                    name: "y".into(),
                    role: FieldRole::LabelClick,
                },
                FieldSpec {
                    name: "z".into(),
                    role: FieldRole::LabelConversion,
                },
            ],
            1,
        );
        assert!(err.is_err());

        // Treatment cardinality must equal K + 1.
        let err = FeatureSchema::new(
            vec![
                FieldSpec {
                    name: "x".into(),
                    role: FieldRole::Dense,
                },
                FieldSpec {
                    name: "t".into(),
                    role: FieldRole::Treatment { cardinality: 4 },
                },
                FieldSpec {
                    name: "y".into(),
                    role: FieldRole::LabelClick,
                },
                FieldSpec {
                    name: "z".into(),
                    role: FieldRole::LabelConversion,
                },
            ],
            1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn fingerprint_changes_with_schema() {
        let a = toy_schema();
        let mut fields: Vec<FieldSpec> = a.fields.clone();
        fields[1].role = FieldRole::Sparse { cardinality: 4 };
        let b = FeatureSchema::new(fields, 1).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
