//! Network file format: CSV with a `nodes:` section and an `edges:` section.
//!
//! ```text
//! # comment lines start with '#'
//! nodes: id,x,y
//! 1,0.0,0.0
//! 2,150.0,0.0
//! edges: id,from,to,length_m,speed_mps,lanes,capacity,outflow
//! 10,1,2,150.0,15.0,1,20,2
//! ```
//!
//! The `capacity` and `outflow` columns are optional (independently); an
//! empty cell in an optional column falls back to the default for that edge.

use std::path::Path as FsPath;

use super::types::{Edge, EdgeId, NetError, Node, NodeId, RoadNetwork};
use crate::Scalar;

/// Reads and validates a network file.
pub fn load_network(path: impl AsRef<FsPath>) -> Result<RoadNetwork, NetError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_network(&text)
}

/// Parses network CSV text. See the module docs for the format.
pub fn parse_network(text: &str) -> Result<RoadNetwork, NetError> {
    #[derive(PartialEq)]
    enum Section {
        Preamble,
        Nodes,
        Edges,
    }

    let mut section = Section::Preamble;
    // Pending header text: Some(s) once a section marker is seen; the header
    // may sit after the colon or on the following line.
    let mut header: Option<Vec<String>> = None;
    let mut nodes = Vec::new();
    let mut edges = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }

        if let Some(rest) = line.strip_prefix("nodes:") {
            section = Section::Nodes;
            header = parse_header(rest);
            if let Some(h) = &header {
                check_node_header(h, lineno)?;
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("edges:") {
            section = Section::Edges;
            header = parse_header(rest);
            if let Some(h) = &header {
                check_edge_header(h, lineno)?;
            }
            continue;
        }

        match section {
            Section::Preamble => {
                return Err(NetError::Parse {
                    line: lineno,
                    msg: format!("expected a 'nodes:' section before data row '{line}'"),
                })
            }
            Section::Nodes => {
                let h = match &header {
                    Some(h) => h,
                    None => {
                        let h = split_fields(line);
                        check_node_header(&h, lineno)?;
                        header = Some(h);
                        continue;
                    }
                };
                let _ = h;
                nodes.push(parse_node_row(line, lineno)?);
            }
            Section::Edges => {
                let h = match &header {
                    Some(h) => h.clone(),
                    None => {
                        let h = split_fields(line);
                        check_edge_header(&h, lineno)?;
                        header = Some(h);
                        continue;
                    }
                };
                edges.push(parse_edge_row(line, lineno, &h)?);
            }
        }
    }

    if section == Section::Preamble {
        return Err(NetError::Parse {
            line: 1,
            msg: "file has no 'nodes:' section".to_string(),
        });
    }

    RoadNetwork::new(nodes, edges)
}

/// Serializes a network back to the file format, rows in id order.
pub fn network_to_csv(net: &RoadNetwork) -> String {
    let mut out = String::new();
    out.push_str("nodes: id,x,y\n");
    for n in net.nodes() {
        out.push_str(&format!("{},{},{}\n", n.id, n.x, n.y));
    }
    out.push_str("edges: id,from,to,length_m,speed_mps,lanes,capacity,outflow\n");
    for e in net.edges() {
        let outflow = e.outflow.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.id, e.from, e.to, e.length_m, e.speed_mps, e.lanes, e.capacity, outflow
        ));
    }
    out
}

/// Writes the network file format to `path`.
pub fn save_network(net: &RoadNetwork, path: impl AsRef<FsPath>) -> Result<(), NetError> {
    let path = path.as_ref();
    std::fs::write(path, network_to_csv(net)).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn split_fields(line: &str) -> Vec<String> {
    line.split(',').map(|f| f.trim().to_string()).collect()
}

fn parse_header(rest: &str) -> Option<Vec<String>> {
    let rest = rest.trim();
    if rest.is_empty() {
        None
    } else {
        Some(split_fields(rest))
    }
}

fn check_node_header(h: &[String], line: usize) -> Result<(), NetError> {
    if h == ["id", "x", "y"] {
        Ok(())
    } else {
        Err(NetError::Parse {
            line,
            msg: format!("node header must be 'id,x,y', got '{}'", h.join(",")),
        })
    }
}

fn check_edge_header(h: &[String], line: usize) -> Result<(), NetError> {
    let required = ["id", "from", "to", "length_m", "speed_mps", "lanes"];
    let mut ok = h.len() >= required.len()
        && h.iter().zip(required.iter()).all(|(a, b)| a == b);
    if ok {
        let extras: Vec<&str> = h[required.len()..].iter().map(String::as_str).collect();
        ok = matches!(
            extras.as_slice(),
            [] | ["capacity"] | ["outflow"] | ["capacity", "outflow"]
        );
    }
    if ok {
        Ok(())
    } else {
        Err(NetError::Parse {
            line,
            msg: format!(
                "edge header must be 'id,from,to,length_m,speed_mps,lanes[,capacity][,outflow]', got '{}'",
                h.join(",")
            ),
        })
    }
}

fn parse_node_row(line: &str, lineno: usize) -> Result<Node, NetError> {
    let f = split_fields(line);
    if f.len() != 3 {
        return Err(NetError::Parse {
            line: lineno,
            msg: format!("node row needs 3 fields, got {}", f.len()),
        });
    }
    Ok(Node {
        id: NodeId(parse_field(&f[0], "node id", lineno)?),
        x: parse_field(&f[1], "x", lineno)?,
        y: parse_field(&f[2], "y", lineno)?,
    })
}

fn parse_edge_row(line: &str, lineno: usize, header: &[String]) -> Result<Edge, NetError> {
    let f = split_fields(line);
    if f.len() != header.len() {
        return Err(NetError::Parse {
            line: lineno,
            msg: format!(
                "edge row has {} fields but the header declares {}",
                f.len(),
                header.len()
            ),
        });
    }
    let length_m: Scalar = parse_field(&f[3], "length_m", lineno)?;
    let lanes: u32 = parse_field(&f[5], "lanes", lineno)?;

    let mut capacity = None;
    let mut outflow = None;
    for (name, value) in header[6..].iter().zip(&f[6..]) {
        if value.is_empty() {
            continue;
        }
        match name.as_str() {
            "capacity" => capacity = Some(parse_field(value, "capacity", lineno)?),
            "outflow" => outflow = Some(parse_field(value, "outflow", lineno)?),
            _ => unreachable!("header validated"),
        }
    }

    Ok(Edge {
        id: EdgeId(parse_field(&f[0], "edge id", lineno)?),
        from: NodeId(parse_field(&f[1], "from", lineno)?),
        to: NodeId(parse_field(&f[2], "to", lineno)?),
        length_m,
        speed_mps: parse_field(&f[4], "speed_mps", lineno)?,
        lanes,
        capacity: capacity.unwrap_or_else(|| Edge::default_capacity(length_m, lanes)),
        outflow,
    })
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str, line: usize) -> Result<T, NetError> {
    s.parse().map_err(|_| NetError::Parse {
        line,
        msg: format!("cannot parse {what} from '{s}'"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRIANGLE: &str = "\
# three nodes, two edges
nodes: id,x,y
1,0.0,0.0
2,100.0,0.0
3,200.0,0.0
edges: id,from,to,length_m,speed_mps,lanes
10,1,2,100,10,1
11,2,3,100,10,1
";

    #[test]
    fn parses_minimal_file() {
        let net = parse_network(TRIANGLE).unwrap();
        assert_eq!(net.num_nodes(), 3);
        assert_eq!(net.num_edges(), 2);
        let e = net.edge_by_id(EdgeId(10)).unwrap();
        assert_eq!(e.from, NodeId(1));
        assert_eq!(e.to, NodeId(2));
        // Capacity column absent: jam-spacing default.
        assert_eq!(e.capacity, 14);
        assert_eq!(e.outflow, None);
    }

    #[test]
    fn header_may_sit_on_next_line() {
        let text = "\
nodes:
id,x,y
1,0,0
2,10,0
edges:
id,from,to,length_m,speed_mps,lanes
5,1,2,10,5,1
";
        let net = parse_network(text).unwrap();
        assert_eq!(net.num_nodes(), 2);
        assert_eq!(net.num_edges(), 1);
    }

    #[test]
    fn optional_columns_and_empty_cells() {
        let text = "\
nodes: id,x,y
1,0,0
2,10,0
edges: id,from,to,length_m,speed_mps,lanes,capacity,outflow
5,1,2,30,5,1,9,3
6,2,1,30,5,1,,
";
        let net = parse_network(text).unwrap();
        let explicit = net.edge_by_id(EdgeId(5)).unwrap();
        assert_eq!(explicit.capacity, 9);
        assert_eq!(explicit.outflow, Some(3));
        let defaulted = net.edge_by_id(EdgeId(6)).unwrap();
        assert_eq!(defaulted.capacity, Edge::default_capacity(30.0, 1));
        assert_eq!(defaulted.outflow, None);
    }

    #[test]
    fn empty_edge_section_is_valid() {
        let text = "\
nodes: id,x,y
1,0,0
2,10,0
edges: id,from,to,length_m,speed_mps,lanes
";
        let net = parse_network(text).unwrap();
        assert_eq!(net.num_nodes(), 2);
        assert_eq!(net.num_edges(), 0);
    }

    #[test]
    fn dangling_endpoint_error_names_the_edge() {
        let text = "\
nodes: id,x,y
1,0,0
edges: id,from,to,length_m,speed_mps,lanes
7,1,99,10,5,1
";
        let err = parse_network(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("edge 7") && msg.contains("99"), "got: {msg}");
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let text = "\
nodes: id,x,y
1,zero,0
";
        match parse_network(text).unwrap_err() {
            NetError::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("x"), "got: {msg}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn bad_header_is_rejected() {
        let text = "\
nodes: id,x,y,z
1,0,0,0
";
        assert!(matches!(
            parse_network(text),
            Err(NetError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn round_trip_preserves_tables() {
        let net = parse_network(TRIANGLE).unwrap();
        let back = parse_network(&network_to_csv(&net)).unwrap();
        assert_eq!(net.nodes(), back.nodes());
        assert_eq!(net.edges(), back.edges());
    }

    #[test]
    fn load_network_reads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.csv");
        std::fs::write(&path, TRIANGLE).unwrap();
        let net = load_network(&path).unwrap();
        assert_eq!(net.num_nodes(), 3);

        let missing = load_network(dir.path().join("absent.csv"));
        assert!(matches!(missing, Err(NetError::Io { .. })));
    }
}
