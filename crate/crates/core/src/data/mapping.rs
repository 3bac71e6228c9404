use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed assignment of semantic classes to supercategories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualMapping {
    /// Supercategory id of every semantic class.
    pub assignment: Vec<usize>,
    pub group_names: Vec<String>,
}

impl ManualMapping {
    pub fn from_assignment(assignment: Vec<usize>) -> Self {
        let groups = assignment.iter().max().map_or(0, |m| m + 1);
        Self {
            assignment,
            group_names: (0..groups).map(|g| format!("group_{g}")).collect(),
        }
    }

    pub fn group_count(&self) -> usize {
        self.group_names.len()
    }

    /// Reads a CSV with columns `semantic_class,supercategory`.
    ///
    /// Classes may be given by index or by name from `class_names`; supercategories by
    /// name (ids follow first appearance) or by integer id.
    pub fn load(path: &Path, class_names: &[String]) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(file, class_names).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn parse<R: std::io::Read>(input: R, class_names: &[String]) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = reader.headers()?.clone();
        if headers.len() < 2
            || headers[0].to_lowercase() != "semantic_class"
            || headers[1].to_lowercase() != "supercategory"
        {
            return Err(Error::Config(
                "mapping CSV needs the header semantic_class,supercategory".into(),
            ));
        }
        let classes = class_names.len();
        let mut assignment: Vec<Option<usize>> = vec![None; classes];
        let mut group_names: Vec<String> = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let class_field = &rec[0];
            let class = match class_field.parse::<usize>() {
                Ok(i) => i,
                Err(_) => class_names
                    .iter()
                    .position(|n| n.eq_ignore_ascii_case(class_field))
                    .ok_or_else(|| Error::Config(format!("unknown semantic class {class_field:?}")))?,
            };
            if class >= classes {
                return Err(Error::Config(format!("class index {class} >= {classes}")));
            }
            let group_field = rec[1].to_string();
            let group = match group_field.parse::<usize>() {
                Ok(g) => {
                    while group_names.len() <= g {
                        group_names.push(format!("group_{}", group_names.len()));
                    }
                    g
                }
                Err(_) => match group_names.iter().position(|n| *n == group_field) {
                    Some(g) => g,
                    None => {
                        group_names.push(group_field);
                        group_names.len() - 1
                    }
                },
            };
            if assignment[class].replace(group).is_some_and(|prev| prev != group) {
                return Err(Error::Config(format!("class {class} mapped twice")));
            }
        }
        let assignment = assignment
            .into_iter()
            .enumerate()
            .map(|(c, g)| g.ok_or_else(|| Error::Config(format!("class {c} has no supercategory"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            assignment,
            group_names,
        })
    }

    pub fn write_csv(&self, path: &Path, class_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["semantic_class", "supercategory"])?;
        for (c, &g) in self.assignment.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            w.write_record([name, self.group_names[g].clone()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
