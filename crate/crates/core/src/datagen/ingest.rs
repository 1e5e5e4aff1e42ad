use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use super::types::{Catalog, DomainDataset, DomainId, Interaction, ItemId, UserSequence};
use crate::error::{Error, Result};

pub const INTERACTIONS_HEADER: &str = "user_id,item_id,timestamp";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub rows: usize,
    pub duplicates_removed: usize,
}

fn parse_err(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses `item_id<TAB>title` lines.
pub fn read_titles<R: BufRead>(reader: R, file: &str) -> Result<Catalog> {
    let mut catalog = Catalog::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, title) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(file, lineno, "expected item_id<TAB>title"))?;
        let id: ItemId = id
            .trim()
            .parse()
            .map_err(|_| parse_err(file, lineno, format!("bad item id {id:?}")))?;
        catalog.insert(id, title.to_string());
    }
    Ok(catalog)
}

/// Parses the comma-separated interactions file (header required), sorts
/// each user's interactions by timestamp and drops exact duplicates.
pub fn read_interactions<R: BufRead>(
    reader: R,
    file: &str,
    domain: DomainId,
    catalog: Catalog,
) -> Result<(DomainDataset, IngestStats)> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| parse_err(file, 1, "missing header line"))?;
    if header.trim() != INTERACTIONS_HEADER {
        return Err(parse_err(file, 1, format!("expected header {INTERACTIONS_HEADER:?}")));
    }

    let mut per_user: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut stats = IngestStats::default();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(parse_err(file, lineno, "expected user_id,item_id,timestamp"));
        }
        let item: ItemId = fields[1]
            .parse()
            .map_err(|_| parse_err(file, lineno, format!("bad item id {:?}", fields[1])))?;
        let timestamp: i64 = fields[2]
            .parse()
            .map_err(|_| parse_err(file, lineno, format!("bad timestamp {:?}", fields[2])))?;
        if !catalog.contains(item) {
            return Err(parse_err(file, lineno, format!("item {item} has no title")));
        }
        stats.rows += 1;
        if !seen.insert((fields[0].to_string(), item, timestamp)) {
            stats.duplicates_removed += 1;
            continue;
        }
        per_user
            .entry(fields[0].to_string())
            .or_default()
            .push(Interaction { item, timestamp });
    }
    if stats.duplicates_removed > 0 {
        log::warn!("{file}: removed {} duplicate interactions", stats.duplicates_removed);
    }

    let users = per_user
        .into_iter()
        .map(|(user_id, mut interactions)| {
            interactions.sort_by_key(|i| (i.timestamp, i.item));
            UserSequence::new(user_id, interactions)
        })
        .collect();
    Ok((DomainDataset { domain, users, catalog }, stats))
}

pub fn ingest_interactions(
    interactions_path: &std::path::Path,
    titles_path: &std::path::Path,
    domain: DomainId,
) -> Result<(DomainDataset, IngestStats)> {
    let open = |p: &std::path::Path| -> Result<std::io::BufReader<std::fs::File>> {
        Ok(std::io::BufReader::new(std::fs::File::open(p)?))
    };
    let catalog = read_titles(open(titles_path)?, &titles_path.display().to_string())?;
    read_interactions(
        open(interactions_path)?,
        &interactions_path.display().to_string(),
        domain,
        catalog,
    )
}

pub fn write_interactions<W: Write>(dataset: &DomainDataset, mut out: W) -> Result<()> {
    writeln!(out, "{INTERACTIONS_HEADER}")?;
    for user in &dataset.users {
        for i in &user.interactions {
            writeln!(out, "{},{},{}", user.user_id, i.item, i.timestamp)?;
        }
    }
    Ok(())
}

pub fn write_titles<W: Write>(catalog: &Catalog, mut out: W) -> Result<()> {
    for (id, title) in &catalog.0 {
        writeln!(out, "{id}\t{title}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn titles() -> Catalog {
        read_titles("1\tRed Shirt\n2\tBlue Shirt\n3\tSocks\n".as_bytes(), "titles.tsv").unwrap()
    }

    #[test]
    fn well_formed() {
        let text = "user_id,item_id,timestamp\nu1,1,10\nu1,2,20\nu1,3,30\n";
        let (d, stats) = read_interactions(text.as_bytes(), "i.csv", "d0".into(), titles()).unwrap();
        assert_eq!(d.users.len(), 1);
        assert_eq!(d.users[0].items(), vec![1, 2, 3]);
        assert_eq!(stats.rows, 3);
    }

    #[test]
    fn missing_timestamp_reports_line() {
        let text = "user_id,item_id,timestamp\nu1,1,10\nu1,2\n";
        let err = read_interactions(text.as_bytes(), "i.csv", "d0".into(), titles()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn header_required() {
        let err = read_interactions("u1,1,10\n".as_bytes(), "i.csv", "d0".into(), titles()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn sorts_and_roundtrips() {
        let text = "user_id,item_id,timestamp\nu1,3,30\nu1,1,10\nu2,2,5\nu1,2,20\n";
        let (d, _) = read_interactions(text.as_bytes(), "i.csv", "d0".into(), titles()).unwrap();
        assert!(d.users.iter().all(|u| u.is_chronological()));

        // oracle: sort the raw rows by (user, timestamp)
        let mut rows: Vec<(String, u32, i64)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap())
            })
            .collect();
        rows.sort_by(|a, b| (&a.0, a.2).cmp(&(&b.0, b.2)));
        let mut expected = String::from("user_id,item_id,timestamp\n");
        for (u, i, t) in rows {
            expected.push_str(&format!("{u},{i},{t}\n"));
        }

        let mut out = Vec::new();
        write_interactions(&d, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), expected);
    }

    #[test]
    fn duplicates_counted() {
        let text = "user_id,item_id,timestamp\nu1,1,10\nu1,1,10\nu1,2,20\n";
        let (d, stats) = read_interactions(text.as_bytes(), "i.csv", "d0".into(), titles()).unwrap();
        assert_eq!(stats.duplicates_removed, 1);
        assert_eq!(d.users[0].len(), 2);
    }
}
