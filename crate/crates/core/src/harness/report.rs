//! Renders CSV and JSON result files as Markdown tables.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Markdown table from CSV text whose first line is the header.
pub fn csv_to_markdown(text: &str) -> Result<String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Config("empty CSV".into()))?.split(',').collect();
    let mut out = format!("| {} |\n|{}\n", header.join(" | "), " --- |".repeat(header.len()));
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Format {
                id: format!("row {}", i + 1),
                msg: format!("{} cells under a {}-column header", cells.len(), header.len()),
            });
        }
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    Ok(out)
}

/// Renders one `.csv` or `.json` (metric report) file.
pub fn render_file(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let report: MetricReport = serde_json::from_str(&text)
                .map_err(|e| Error::Format { id: path.display().to_string(), msg: e.to_string() })?;
            csv_to_markdown(&report.to_csv())?
        }
        _ => csv_to_markdown(&text)?,
    };
    let title = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
    Ok(format!("### {title}\n\n{table}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_rows_and_rejects_ragged_csv() {
        let md = csv_to_markdown("a,b\n1,2\n3,4\n").unwrap();
        assert_eq!(md, "| a | b |\n| --- | --- |\n| 1 | 2 |\n| 3 | 4 |\n");
        assert!(csv_to_markdown("a,b\n1\n").is_err());
        assert!(csv_to_markdown("").is_err());
    }
}
