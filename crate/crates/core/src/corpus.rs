//! API documentation corpora.
//!
//! A corpus is a line-delimited file of documented APIs from one library.
//! Each line is a flat JSON object:
//!
//! ```text
//! {"source": "pytorch", "name": "torch.argsort", "description": "...",
//!  "params": [{"name": "input", "type": "Tensor"}, {"name": "dim", "type": "int", "default": -1}]}
//! ```
//!
//! Loading normalizes API names, classifies every parameter as control or
//! functional and maps the documented type into the abstract type space.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record {index} (line {line}): {message}")]
    Malformed {
        index: usize,
        line: usize,
        message: String,
    },
    #[error("record {index} (line {line}): field `{field}`: {message}")]
    Field {
        index: usize,
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("record {index}: duplicate API `{name}`")]
    Duplicate { index: usize, name: String },
    #[error("record {index}: source `{found}` differs from corpus source `{expected}`")]
    MixedSource {
        index: usize,
        expected: String,
        found: String,
    },
}

/// Unified parameter type vocabulary shared by every source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AbstractType {
    Tensor,
    Int,
    Float,
    Bool,
    Shape,
    String,
    Complex,
    Unknown,
}

impl AbstractType {
    /// `Unknown` is never compatible with anything, itself included.
    pub fn compatible(self, other: AbstractType) -> bool {
        self == other && self != AbstractType::Unknown
    }
}

impl fmt::Display for AbstractType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Control,
    Functional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub raw_type: String,
    pub abstract_type: AbstractType,
    pub role: ParamRole,
    pub has_default: bool,
}

impl ParamSpec {
    pub fn is_functional(&self) -> bool {
        self.role == ParamRole::Functional
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiRecord {
    pub source_id: String,
    pub qualified_name: String,
    pub normalized_name: String,
    pub description: String,
    pub params: Vec<ParamSpec>,
}

impl ApiRecord {
    pub fn functional_params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| p.is_functional())
    }

    pub fn functional_types(&self) -> Vec<AbstractType> {
        self.functional_params().map(|p| p.abstract_type).collect()
    }
}

/// Lowercase the last dotted segment of an API name.
///
/// An overload suffix (`#2`) is dropped as well, so every overload of an
/// API shares one normalized name.
pub fn normalize_api_name(qualified: &str) -> String {
    let base = qualified.split('#').next().unwrap_or(qualified);
    let last = base.rsplit('.').next().unwrap_or(base);
    last.to_lowercase()
}

/// Keywords marking a parameter as control-related rather than functional.
pub const DEFAULT_CONTROL_KEYWORDS: &[&str] = &[
    // naming
    "name",
    "layer_name",
    "op_name",
    // device and execution control
    "device",
    "jit",
    "compile",
    "layout",
    "autocast",
    // data type and shape configuration
    "dtype",
    "output_dtype",
    "input_shape",
    "output_shape",
    "validate_shape",
    // stability and reproducibility
    "seed",
    "stable",
    "deterministic",
    // logging and debugging
    "verbose",
    "debug",
    "log_level",
    // sorting and direction control
    "direction",
    "ascending",
    "descending",
];

#[derive(Debug, Clone)]
pub struct ControlList {
    keywords: Vec<String>,
}

impl Default for ControlList {
    fn default() -> Self {
        Self::new(DEFAULT_CONTROL_KEYWORDS.iter().copied())
    }
}

impl ControlList {
    pub fn new<I, S>(keywords: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut keywords: Vec<String> = keywords
            .into_iter()
            .map(|k| k.as_ref().trim().to_lowercase())
            .filter(|k| !k.is_empty())
            .collect();
        keywords.sort();
        keywords.dedup();
        Self { keywords }
    }

    fn contains(&self, word: &str) -> bool {
        self.keywords.binary_search_by(|k| k.as_str().cmp(word)).is_ok()
    }

    /// A name is control-related if it, or any of its `_`-delimited
    /// suffixes (`layer_name` -> `name`), is a keyword.
    pub fn classify(&self, param_name: &str) -> ParamRole {
        let lowered = param_name.to_lowercase();
        if self.contains(&lowered) {
            return ParamRole::Control;
        }
        let mut rest = lowered.as_str();
        while let Some(pos) = rest.find('_') {
            rest = &rest[pos + 1..];
            if !rest.is_empty() && self.contains(rest) {
                return ParamRole::Control;
            }
        }
        ParamRole::Functional
    }
}

/// Maps documented type names into the abstract type space.
///
/// Lookup is case-insensitive: first a per-source row, then the generic
/// fallback. Anything unmapped is `Unknown`.
#[derive(Debug, Clone)]
pub struct TypeMap {
    per_source: HashMap<String, HashMap<String, AbstractType>>,
    generic: HashMap<String, AbstractType>,
}

impl Default for TypeMap {
    fn default() -> Self {
        use AbstractType::*;
        let mut map = TypeMap {
            per_source: HashMap::new(),
            generic: HashMap::new(),
        };
        let rows: &[(&str, &str, AbstractType)] = &[
            ("pytorch", "Tensor", Tensor),
            ("tensorflow", "Tensor", Tensor),
            ("keras", "Tensor", Tensor),
            ("chainer", "Variable", Tensor),
            ("jax", "Array", Tensor),
            ("pytorch", "List", Shape),
            ("tensorflow", "Tuple", Shape),
            ("keras", "Tuple", Shape),
            ("chainer", "Sequence", Shape),
            ("jax", "List", Shape),
        ];
        for (source, raw, ty) in rows {
            map.insert_source(source, raw, *ty);
        }
        let generic: &[(&str, AbstractType)] = &[
            ("tensor", Tensor),
            ("array", Tensor),
            ("ndarray", Tensor),
            ("variable", Tensor),
            ("array_like", Tensor),
            ("int", Int),
            ("integer", Int),
            ("int32", Int),
            ("int64", Int),
            ("long", Int),
            ("float", Float),
            ("double", Float),
            ("float32", Float),
            ("float64", Float),
            ("number", Float),
            ("scalar", Float),
            ("bool", Bool),
            ("boolean", Bool),
            ("list", Shape),
            ("tuple", Shape),
            ("sequence", Shape),
            ("shape", Shape),
            ("list[int]", Shape),
            ("tuple[int]", Shape),
            ("str", String),
            ("string", String),
            ("complex", Complex),
        ];
        for (raw, ty) in generic {
            map.generic.insert((*raw).to_string(), *ty);
        }
        map
    }
}

impl TypeMap {
    pub fn insert_source(&mut self, source_id: &str, raw_type: &str, ty: AbstractType) {
        self.per_source
            .entry(source_id.to_lowercase())
            .or_default()
            .insert(raw_type.trim().to_lowercase(), ty);
    }

    pub fn map(&self, source_id: &str, raw_type: &str) -> AbstractType {
        let mut key = raw_type.trim().to_lowercase();
        if let Some(inner) = key
            .strip_prefix("optional[")
            .and_then(|s| s.strip_suffix(']'))
        {
            key = inner.trim().to_string();
        }
        if let Some(ty) = self
            .per_source
            .get(&source_id.to_lowercase())
            .and_then(|m| m.get(&key))
        {
            return *ty;
        }
        self.generic.get(&key).copied().unwrap_or(AbstractType::Unknown)
    }
}

/// Everything needed to turn raw records into normalized `ApiRecord`s.
#[derive(Debug, Clone, Default)]
pub struct CorpusRules {
    pub control: ControlList,
    pub types: TypeMap,
}

#[derive(Debug, Clone, Serialize)]
pub struct Corpus {
    pub source_id: String,
    pub records: Vec<ApiRecord>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(source_id: impl Into<String>) -> Self {
        Corpus {
            source_id: source_id.into(),
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn get(&self, qualified_name: &str) -> Option<&ApiRecord> {
        self.index.get(qualified_name).map(|&i| &self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends a record, rejecting a second record with the same name.
    pub fn push(&mut self, record: ApiRecord) -> Result<(), CorpusError> {
        if self.index.contains_key(&record.qualified_name) {
            return Err(CorpusError::Duplicate {
                index: self.records.len(),
                name: record.qualified_name,
            });
        }
        self.index
            .insert(record.qualified_name.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }
}

pub fn load_corpus(path: impl AsRef<Path>, rules: &CorpusRules) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text, rules)
}

struct RawParam {
    name: String,
    raw_type: String,
    has_default: bool,
}

/// Parses corpus text. Blank lines are skipped; record indices count
/// records only.
///
/// The corpus source id is taken from the first record. A name that
/// reappears with a different parameter list is an overload and is stored
/// as `name#2`, `name#3`, ...; a name that reappears with the same
/// parameter list is a duplicate and rejected.
pub fn parse_corpus(text: &str, rules: &CorpusRules) -> Result<Corpus, CorpusError> {
    let mut corpus: Option<Corpus> = None;
    // base name -> parameter signatures seen so far
    let mut seen: BTreeMap<String, Vec<Vec<(String, String)>>> = BTreeMap::new();
    let mut index = 0usize;

    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            index,
            line: line_no,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| CorpusError::Malformed {
            index,
            line: line_no,
            message: "record is not an object".into(),
        })?;
        let field_err = |field: &'static str, message: &str| CorpusError::Field {
            index,
            line: line_no,
            field,
            message: message.to_string(),
        };
        let text_field = |field: &'static str| -> Result<String, CorpusError> {
            match obj.get(field) {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(field_err(field, "expected a string")),
                None => Err(field_err(field, "missing")),
            }
        };

        let source = text_field("source")?;
        let name = text_field("name")?;
        let description = text_field("description")?;
        if source.trim().is_empty() {
            return Err(field_err("source", "empty"));
        }
        if normalize_api_name(&name).is_empty() {
            return Err(field_err("name", "empty API name"));
        }

        let params = match obj.get("params") {
            Some(Value::Array(items)) => items
                .iter()
                .map(|item| {
                    let p = item
                        .as_object()
                        .ok_or_else(|| field_err("params", "parameter is not an object"))?;
                    let pname = match p.get("name") {
                        Some(Value::String(s)) if !s.is_empty() => s.clone(),
                        _ => return Err(field_err("params", "parameter without a name")),
                    };
                    let ptype = match p.get("type") {
                        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
                        _ => {
                            return Err(field_err(
                                "params",
                                &format!("parameter `{pname}` without a type"),
                            ))
                        }
                    };
                    Ok(RawParam {
                        name: pname,
                        raw_type: ptype,
                        has_default: p.contains_key("default"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
            Some(_) => return Err(field_err("params", "expected an array")),
            None => return Err(field_err("params", "missing")),
        };

        let corpus = corpus.get_or_insert_with(|| Corpus::new(source.clone()));
        if corpus.source_id != source {
            return Err(CorpusError::MixedSource {
                index,
                expected: corpus.source_id.clone(),
                found: source,
            });
        }

        let signature: Vec<(String, String)> = params
            .iter()
            .map(|p| (p.name.clone(), p.raw_type.clone()))
            .collect();
        let prior = seen.entry(name.clone()).or_default();
        if prior.contains(&signature) {
            return Err(CorpusError::Duplicate { index, name });
        }
        prior.push(signature);
        let qualified_name = if prior.len() == 1 {
            name.clone()
        } else {
            format!("{name}#{}", prior.len())
        };

        let params = params
            .into_iter()
            .map(|p| ParamSpec {
                role: rules.control.classify(&p.name),
                abstract_type: rules.types.map(&source, &p.raw_type),
                name: p.name,
                raw_type: p.raw_type,
                has_default: p.has_default,
            })
            .collect();

        let record = ApiRecord {
            source_id: source,
            normalized_name: normalize_api_name(&qualified_name),
            qualified_name,
            description,
            params,
        };
        corpus.push(record).map_err(|e| match e {
            CorpusError::Duplicate { name, .. } => CorpusError::Duplicate { index, name },
            other => other,
        })?;
        index += 1;
    }

    Ok(corpus.unwrap_or_else(|| Corpus::new("")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rules() -> CorpusRules {
        CorpusRules::default()
    }

    #[test]
    fn normalizes_names() {
        assert_eq!(normalize_api_name("tf.math.angle"), "angle");
        assert_eq!(normalize_api_name("argsort"), "argsort");
        assert_eq!(normalize_api_name("Torch.ArgSort"), "argsort");
        assert_eq!(normalize_api_name("torch.nn.functional.log_softmax"), "log_softmax");
        assert_eq!(normalize_api_name("torch.max#2"), "max");
    }

    #[test]
    fn classifies_control_params() {
        let c = ControlList::default();
        assert_eq!(c.classify("descending"), ParamRole::Control);
        assert_eq!(c.classify("input"), ParamRole::Functional);
        assert_eq!(c.classify("output_dtype"), ParamRole::Control);
        assert_eq!(c.classify("layer_name"), ParamRole::Control);
        assert_eq!(c.classify("Name"), ParamRole::Control);
        assert_eq!(c.classify("axis"), ParamRole::Functional);
        assert_eq!(c.classify("shape"), ParamRole::Functional);
        assert_eq!(c.classify("name_"), ParamRole::Functional);
    }

    #[test]
    fn maps_types() {
        let t = TypeMap::default();
        assert_eq!(t.map("jax", "Array"), AbstractType::Tensor);
        assert_eq!(t.map("pytorch", "Tensor"), AbstractType::Tensor);
        assert_eq!(t.map("chainer", "Sequence"), AbstractType::Shape);
        assert_eq!(t.map("chainer", "Variable"), AbstractType::Tensor);
        assert_eq!(t.map("pytorch", "Optional[int]"), AbstractType::Int);
        assert_eq!(t.map("pytorch", "Generator"), AbstractType::Unknown);
    }

    #[test]
    fn loads_single_record() {
        let text = r#"{"source":"pytorch","name":"torch.argsort","description":"Returns the indices that sort a tensor along a given dimension.","params":[{"name":"input","type":"Tensor"},{"name":"dim","type":"int","default":-1},{"name":"descending","type":"bool","default":false},{"name":"stable","type":"bool","default":false}]}"#;
        let corpus = parse_corpus(text, &rules()).unwrap();
        assert_eq!(corpus.len(), 1);
        let rec = corpus.get("torch.argsort").unwrap();
        assert_eq!(rec.normalized_name, "argsort");
        assert_eq!(
            rec.functional_types(),
            vec![AbstractType::Tensor, AbstractType::Int]
        );
        assert!(rec.params[1].has_default);
        assert!(!rec.params[0].has_default);
        assert_eq!(rec.params[2].role, ParamRole::Control);
    }

    #[test]
    fn empty_corpus() {
        let corpus = parse_corpus("", &rules()).unwrap();
        assert!(corpus.is_empty());
        let corpus = parse_corpus("\n\n", &rules()).unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn missing_description_names_record_and_field() {
        let text = concat!(
            r#"{"source":"jax","name":"jax.numpy.argsort","description":"d","params":[]}"#,
            "\n",
            r#"{"source":"jax","name":"jax.numpy.sort","params":[]}"#
        );
        match parse_corpus(text, &rules()).unwrap_err() {
            CorpusError::Field { index, field, .. } => {
                assert_eq!(index, 1);
                assert_eq!(field, "description");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_overload() {
        let rec = r#"{"source":"pytorch","name":"torch.max","description":"d","params":[{"name":"input","type":"Tensor"}]}"#;
        let text = format!("{rec}\n{rec}");
        assert!(matches!(
            parse_corpus(&text, &rules()),
            Err(CorpusError::Duplicate { index: 1, .. })
        ));

        let overload = r#"{"source":"pytorch","name":"torch.max","description":"d","params":[{"name":"input","type":"Tensor"},{"name":"dim","type":"int"}]}"#;
        let corpus = parse_corpus(&format!("{rec}\n{overload}"), &rules()).unwrap();
        assert_eq!(corpus.len(), 2);
        let second = corpus.get("torch.max#2").unwrap();
        assert_eq!(second.normalized_name, "max");
    }

    #[test]
    fn mixed_sources_rejected() {
        let text = concat!(
            r#"{"source":"jax","name":"a","description":"d","params":[]}"#,
            "\n",
            r#"{"source":"tensorflow","name":"b","description":"d","params":[]}"#
        );
        assert!(matches!(
            parse_corpus(text, &rules()),
            Err(CorpusError::MixedSource { index: 1, .. })
        ));
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "\n{not json}";
        match parse_corpus(text, &rules()).unwrap_err() {
            CorpusError::Malformed { index, line, .. } => {
                assert_eq!(index, 0);
                assert_eq!(line, 2);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
