use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KgEdge, KgError, KgNode, KnowledgeGraph};

/// Maps canonical field names onto the column headers of a third-party export
/// (for example a PrimeKG CSV dump). Unset fields use the canonical header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub delimiter: char,
    pub node_id: String,
    pub node_type: String,
    pub node_name: String,
    pub source: String,
    pub src_id: String,
    pub dst_id: String,
    pub relation: String,
    pub display_relation: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            delimiter: '\t',
            node_id: "node_id".into(),
            node_type: "node_type".into(),
            node_name: "node_name".into(),
            source: "source".into(),
            src_id: "src_id".into(),
            dst_id: "dst_id".into(),
            relation: "relation".into(),
            display_relation: "display_relation".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub nodes: usize,
    pub edges: usize,
    pub duplicate_edges_dropped: usize,
}

struct Table {
    header: HashMap<String, usize>,
    rows: Vec<(u64, csv::StringRecord)>,
}

fn read_table(path: &Path, delimiter: char) -> Result<Table, KgError> {
    let file = std::fs::File::open(path).map_err(|source| KgError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut builder = csv::ReaderBuilder::new();
    builder.delimiter(delimiter as u8).has_headers(true);
    if delimiter == '\t' {
        builder.quoting(false);
    }
    let mut reader = builder.from_reader(std::io::BufReader::new(file));
    let csv_err = |source| KgError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let header = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        rows.push((line, record));
    }
    Ok(Table { header, rows })
}

impl Table {
    fn required(&self, path: &Path, column: &str) -> Result<usize, KgError> {
        self.header.get(column).copied().ok_or_else(|| KgError::MissingColumn {
            path: path.to_path_buf(),
            column: column.to_string(),
        })
    }

    fn optional(&self, column: &str) -> Option<usize> {
        self.header.get(column).copied()
    }
}

fn field(record: &csv::StringRecord, ix: usize) -> String {
    record.get(ix).unwrap_or("").trim().to_string()
}

/// Load `nodes.tsv` and `edges.tsv` (or remapped third-party tables) into an indexed graph.
///
/// `source` and `display_relation` columns are optional; a missing display
/// label falls back to the machine relation.
pub fn load_graph(
    node_table: &Path,
    edge_table: &Path,
    column_map: Option<&ColumnMap>,
) -> Result<(KnowledgeGraph, LoadReport), KgError> {
    let default_map = ColumnMap::default();
    let map = column_map.unwrap_or(&default_map);

    let table = read_table(node_table, map.delimiter)?;
    let id_ix = table.required(node_table, &map.node_id)?;
    let type_ix = table.required(node_table, &map.node_type)?;
    let name_ix = table.required(node_table, &map.node_name)?;
    let source_ix = table.optional(&map.source);

    let mut seen: HashMap<String, u64> = HashMap::with_capacity(table.rows.len());
    let mut nodes = Vec::with_capacity(table.rows.len());
    for (line, record) in &table.rows {
        let node = KgNode {
            node_id: field(record, id_ix),
            node_type: field(record, type_ix),
            node_name: field(record, name_ix),
            source: source_ix.map(|i| field(record, i)).unwrap_or_default(),
        };
        if node.node_name.is_empty() {
            return Err(KgError::EmptyName {
                node_id: node.node_id,
                line: *line,
            });
        }
        if seen.insert(node.node_id.clone(), *line).is_some() {
            return Err(KgError::DuplicateNode {
                node_id: node.node_id,
                line: *line,
            });
        }
        nodes.push(node);
    }

    let table = read_table(edge_table, map.delimiter)?;
    let src_ix = table.required(edge_table, &map.src_id)?;
    let dst_ix = table.required(edge_table, &map.dst_id)?;
    let rel_ix = table.required(edge_table, &map.relation)?;
    let display_ix = table.optional(&map.display_relation);

    let mut unknown = Vec::new();
    let mut edges = Vec::with_capacity(table.rows.len());
    for (line, record) in &table.rows {
        let relation = field(record, rel_ix);
        let edge = KgEdge {
            src: field(record, src_ix),
            dst: field(record, dst_ix),
            display_relation: display_ix
                .map(|i| field(record, i))
                .filter(|d| !d.is_empty())
                .unwrap_or_else(|| relation.clone()),
            relation,
        };
        for id in [&edge.src, &edge.dst] {
            if !seen.contains_key(id) {
                unknown.push((*line, id.clone()));
            }
        }
        edges.push(edge);
    }
    if !unknown.is_empty() {
        return Err(KgError::UnknownNodes { rows: unknown });
    }

    let (graph, dropped) = KnowledgeGraph::new(nodes, edges)?;
    let report = LoadReport {
        nodes: graph.node_count(),
        edges: graph.edge_count(),
        duplicate_edges_dropped: dropped,
    };
    log::info!(
        "loaded knowledge graph: {} nodes, {} edges ({} duplicate rows dropped)",
        report.nodes,
        report.edges,
        report.duplicate_edges_dropped
    );
    Ok((graph, report))
}
