//! Dataset manifests, pair instances and attribute annotations.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ReidError, Result};

pub const MANIFEST_HEADER: [&str; 6] = ["record_id", "player_id", "role", "image_path", "height", "width"];
pub const ATTRIBUTE_HEADER: [&str; 5] = ["record_id", "jersey_number", "jersey_colour", "sex", "skin_colour"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
}

impl FromStr for Role {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "query" => Ok(Role::Query),
            "gallery" => Ok(Role::Gallery),
            other => Err(ReidError::Invalid(format!("unknown role token `{other}`"))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Query => "query",
            Role::Gallery => "gallery",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
    Challenge,
}

impl SplitName {
    /// Guesses the split from a manifest file name; anything that is not
    /// obviously `test` or `challenge` is treated as training data.
    pub fn infer(path: &Path) -> Self {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if stem.contains("challenge") {
            SplitName::Challenge
        } else if stem.contains("test") {
            SplitName::Test
        } else {
            SplitName::Train
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub record_id: String,
    pub player_id: String,
    pub role: Role,
    pub image_path: PathBuf,
    pub height_px: u32,
    pub width_px: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub records: Vec<ImageRecord>,
    pub players: BTreeSet<String>,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    record_id: String,
    player_id: String,
    role: String,
    image_path: String,
    height: String,
    width: String,
}

impl DatasetSplit {
    pub fn new(name: SplitName, records: Vec<ImageRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.record_id.as_str()) {
                return Err(ReidError::DuplicateRecord(r.record_id.clone()));
            }
            if r.height_px == 0 || r.width_px == 0 {
                return Err(ReidError::Invalid(format!(
                    "record `{}` has a zero image dimension",
                    r.record_id
                )));
            }
        }
        let players = records.iter().map(|r| r.player_id.clone()).collect();
        Ok(Self { name, records, players })
    }

    pub fn queries(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.role == Role::Query)
    }

    pub fn gallery(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.role == Role::Gallery)
    }

    pub fn get(&self, record_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.record_id == record_id)
    }

    /// Players that have gallery images but no query image. Such players
    /// cannot form pair instances.
    pub fn players_without_query(&self) -> BTreeSet<String> {
        let with_query: HashSet<&str> = self.queries().map(|r| r.player_id.as_str()).collect();
        self.gallery()
            .filter(|r| !with_query.contains(r.player_id.as_str()))
            .map(|r| r.player_id.clone())
            .collect()
    }

    /// Concatenates two splits (e.g. train + test for a final model). Keeps
    /// the name of `self`; record ids must stay unique.
    pub fn merge(self, other: DatasetSplit) -> Result<Self> {
        let mut records = self.records;
        records.extend(other.records);
        DatasetSplit::new(self.name, records)
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetSplit> {
    load_manifest_as(path, SplitName::infer(path))
}

pub fn load_manifest_as(path: &Path, name: SplitName) -> Result<DatasetSplit> {
    let file = std::fs::File::open(path).map_err(|e| ReidError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);

    let manifest_err = |line: usize, message: String| ReidError::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };

    let headers = reader
        .headers()
        .map_err(|e| manifest_err(1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(manifest_err(
            1,
            format!("expected header `{}`", MANIFEST_HEADER.join(",")),
        ));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| manifest_err(line, e.to_string()))?;
        if row.record_id.is_empty() || row.player_id.is_empty() {
            return Err(manifest_err(line, "empty record_id or player_id".into()));
        }
        let role = row
            .role
            .parse::<Role>()
            .map_err(|e| manifest_err(line, e.to_string()))?;
        let dim = |v: &str, what: &str| -> Result<u32> {
            match v.parse::<u32>() {
                Ok(x) if x > 0 => Ok(x),
                _ => Err(manifest_err(line, format!("{what} must be a positive integer, got `{v}`"))),
            }
        };
        let height_px = dim(&row.height, "height")?;
        let width_px = dim(&row.width, "width")?;
        if !seen.insert(row.record_id.clone()) {
            return Err(ReidError::DuplicateRecord(row.record_id));
        }
        let image_path = PathBuf::from(&row.image_path);
        let image_path = if image_path.is_absolute() {
            image_path
        } else {
            base.join(image_path)
        };
        records.push(ImageRecord {
            record_id: row.record_id,
            player_id: row.player_id,
            role,
            image_path,
            height_px,
            width_px,
        });
    }
    if records.is_empty() {
        return Err(ReidError::NoRecords(path.to_path_buf()));
    }
    DatasetSplit::new(name, records)
}

pub fn write_manifest(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ReidError::Invalid(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let wrap = |e: csv::Error| ReidError::Invalid(e.to_string());
    w.write_record(MANIFEST_HEADER).map_err(wrap)?;
    for r in &split.records {
        let rel = r.image_path.strip_prefix(base).unwrap_or(&r.image_path);
        w.write_record([
            r.record_id.as_str(),
            r.player_id.as_str(),
            &r.role.to_string(),
            &rel.to_string_lossy(),
            &r.height_px.to_string(),
            &r.width_px.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| ReidError::io(path, e))
}

/// The atomic training unit: one query and one gallery image of a player.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairInstance {
    pub player_id: String,
    pub query_record: ImageRecord,
    pub gallery_record: ImageRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingStats {
    pub skipped_players: usize,
    pub skipped_gallery_records: usize,
}

/// Pairs every gallery record with a query record of the same player, picked
/// uniformly with a seeded generator. Players without a query image are
/// skipped and counted.
pub fn build_pair_instances(split: &DatasetSplit, seed: u64) -> (Vec<PairInstance>, PairingStats) {
    let mut queries: HashMap<&str, Vec<&ImageRecord>> = HashMap::new();
    let mut gallery: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in &split.records {
        match r.role {
            Role::Query => queries.entry(&r.player_id).or_default().push(r),
            Role::Gallery => gallery.entry(&r.player_id).or_default().push(r),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = PairingStats::default();
    let mut out = Vec::new();
    for (player, items) in gallery {
        let Some(qs) = queries.get(player) else {
            stats.skipped_players += 1;
            stats.skipped_gallery_records += items.len();
            continue;
        };
        for g in items {
            let q = qs.choose(&mut rng).expect("non-empty query list");
            out.push(PairInstance {
                player_id: player.to_string(),
                query_record: (*q).clone(),
                gallery_record: g.clone(),
            });
        }
    }
    if stats.skipped_players > 0 {
        log::warn!(
            "skipped {} players ({} gallery images) without a query image",
            stats.skipped_players,
            stats.skipped_gallery_records
        );
    }
    (out, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    JerseyNumber,
    JerseyColour,
    Sex,
    SkinColour,
}

pub const JERSEY_COLOURS: [&str; 7] = ["black", "blue", "green", "orange", "red", "white", "yellow"];
pub const SEXES: [&str; 2] = ["male", "female"];
pub const SKIN_COLOURS: [&str; 2] = ["white", "black"];
pub const MAX_JERSEY_NUMBER: u32 = 32;

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::JerseyNumber,
        Attribute::JerseyColour,
        Attribute::Sex,
        Attribute::SkinColour,
    ];

    /// Class names in prompt order.
    pub fn classes(self) -> Vec<String> {
        match self {
            Attribute::JerseyNumber => (1..=MAX_JERSEY_NUMBER).map(|n| n.to_string()).collect(),
            Attribute::JerseyColour => JERSEY_COLOURS.iter().map(|s| s.to_string()).collect(),
            Attribute::Sex => SEXES.iter().map(|s| s.to_string()).collect(),
            Attribute::SkinColour => SKIN_COLOURS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::JerseyNumber => "jersey_number",
            Attribute::JerseyColour => "jersey_colour",
            Attribute::Sex => "sex",
            Attribute::SkinColour => "skin_colour",
        }
    }
}

impl FromStr for Attribute {
    type Err = ReidError;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| ReidError::Invalid(format!("unknown attribute `{s}`")))
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ground-truth attributes of one annotated crop. Values are stored as class
/// indices into [`Attribute::classes`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeAnnotation {
    pub record_id: String,
    pub jersey_number: Option<u32>,
    pub jersey_colour: Option<usize>,
    pub sex: Option<usize>,
    pub skin_colour: Option<usize>,
}

impl AttributeAnnotation {
    pub fn label(&self, attribute: Attribute) -> Option<usize> {
        match attribute {
            Attribute::JerseyNumber => self.jersey_number.map(|n| n as usize - 1),
            Attribute::JerseyColour => self.jersey_colour,
            Attribute::Sex => self.sex,
            Attribute::SkinColour => self.skin_colour,
        }
    }
}

fn class_index(token: &str, classes: &[&str], what: &str) -> Result<Option<usize>> {
    if token.is_empty() {
        return Ok(None);
    }
    classes
        .iter()
        .position(|c| *c == token)
        .map(Some)
        .ok_or_else(|| ReidError::Invalid(format!("unknown {what} class `{token}`")))
}

/// Loads the attribute annotation file. When `split` is given, every
/// annotated record must exist in it.
pub fn load_attribute_annotations(
    path: &Path,
    split: Option<&DatasetSplit>,
) -> Result<BTreeMap<String, AttributeAnnotation>> {
    let file = std::fs::File::open(path).map_err(|e| ReidError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(file);
    let manifest_err = |line: usize, message: String| ReidError::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut out = BTreeMap::new();
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(manifest_err(1, e.to_string())),
    };
    if headers.is_empty() {
        return Ok(out);
    }
    if headers.iter().collect::<Vec<_>>() != ATTRIBUTE_HEADER {
        return Err(manifest_err(
            1,
            format!("expected header `{}`", ATTRIBUTE_HEADER.join(",")),
        ));
    }
    let known: Option<HashSet<&str>> =
        split.map(|s| s.records.iter().map(|r| r.record_id.as_str()).collect());

    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| manifest_err(line, e.to_string()))?;
        let record_id = row[0].to_string();
        if let Some(known) = &known {
            if !known.contains(record_id.as_str()) {
                return Err(manifest_err(
                    line,
                    format!("record `{record_id}` is not part of the referenced split"),
                ));
            }
        }
        let jersey_number = if row[1].is_empty() {
            None
        } else {
            match row[1].parse::<u32>() {
                Ok(n) if (1..=MAX_JERSEY_NUMBER).contains(&n) => Some(n),
                _ => {
                    return Err(manifest_err(
                        line,
                        format!("jersey_number must be in 1..={MAX_JERSEY_NUMBER}, got `{}`", &row[1]),
                    ))
                }
            }
        };
        let wrap = |e: ReidError| manifest_err(line, e.to_string());
        let ann = AttributeAnnotation {
            record_id: record_id.clone(),
            jersey_number,
            jersey_colour: class_index(&row[2], &JERSEY_COLOURS, "jersey_colour").map_err(wrap)?,
            sex: class_index(&row[3], &SEXES, "sex").map_err(wrap)?,
            skin_colour: class_index(&row[4], &SKIN_COLOURS, "skin_colour").map_err(wrap)?,
        };
        if out.insert(record_id.clone(), ann).is_some() {
            return Err(ReidError::DuplicateRecord(record_id));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn rec(id: &str, player: &str, role: Role) -> ImageRecord {
        ImageRecord {
            record_id: id.into(),
            player_id: player.into(),
            role,
            image_path: PathBuf::from(format!("{id}.png")),
            height_px: 10,
            width_px: 5,
        }
    }

    #[test]
    fn loads_manifest_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "train.csv",
            "record_id,player_id,role,image_path,height,width\n\
             a,p1,query,img/a.png,209,100\n\
             b,p1,gallery,img/b.png,200,90\n\
             c,p2,query,/abs/c.png,10,10\n",
        );
        let s = load_manifest(&p).unwrap();
        assert_eq!(s.name, SplitName::Train);
        assert_eq!(s.records.len(), 3);
        assert_eq!(s.records[0].record_id, "a");
        assert_eq!(s.records[0].image_path, dir.path().join("img/a.png"));
        assert_eq!(s.records[2].image_path, PathBuf::from("/abs/c.png"));
        assert_eq!(s.players.len(), 2);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let header = "record_id,player_id,role,image_path,height,width\n";
        let empty = write(dir.path(), "empty.csv", header);
        assert!(matches!(load_manifest(&empty), Err(ReidError::NoRecords(_))));

        let dup = write(
            dir.path(),
            "dup.csv",
            &format!("{header}x,p,query,a.png,1,1\nx,p,gallery,b.png,1,1\n"),
        );
        let err = load_manifest(&dup).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");

        let role = write(dir.path(), "role.csv", &format!("{header}x,p,probe,a.png,1,1\n"));
        assert!(load_manifest(&role).unwrap_err().to_string().contains("probe"));

        let bad = write(dir.path(), "bad.csv", &format!("{header}x,p,query,a.png,0,1\n"));
        assert!(matches!(load_manifest(&bad), Err(ReidError::Manifest { line: 2, .. })));

        assert!(matches!(
            load_manifest(&dir.path().join("missing.csv")),
            Err(ReidError::Io { .. })
        ));
    }

    #[test]
    fn paper_scale_train_split_has_436_players() {
        let mut records = Vec::new();
        let mut g = 0;
        for p in 0..436 {
            records.push(rec(&format!("q{p}"), &format!("p{p}"), Role::Query));
            // 8133 gallery rows spread over 436 players
            let n = if p < 8133 % 436 { 8133 / 436 + 1 } else { 8133 / 436 };
            for _ in 0..n {
                records.push(rec(&format!("g{g}"), &format!("p{p}"), Role::Gallery));
                g += 1;
            }
        }
        assert_eq!(g, 8133);
        let dir = tempfile::tempdir().unwrap();
        let split = DatasetSplit::new(SplitName::Train, records).unwrap();
        let path = dir.path().join("train.csv");
        write_manifest(&path, &split).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.players.len(), 436);
        assert_eq!(back.queries().count(), 436);
        assert_eq!(back.gallery().count(), 8133);
    }

    #[test]
    fn pairs_share_query_and_are_deterministic() {
        let mut records = vec![rec("q", "a", Role::Query)];
        records.extend((0..19).map(|i| rec(&format!("g{i}"), "a", Role::Gallery)));
        let split = DatasetSplit::new(SplitName::Train, records).unwrap();
        let (pairs, stats) = build_pair_instances(&split, 3);
        assert_eq!(pairs.len(), 19);
        assert_eq!(stats, PairingStats::default());
        assert!(pairs.iter().all(|p| p.query_record.record_id == "q"));

        let one = DatasetSplit::new(
            SplitName::Train,
            vec![rec("q", "a", Role::Query), rec("g", "a", Role::Gallery)],
        )
        .unwrap();
        assert_eq!(build_pair_instances(&one, 0).0.len(), 1);

        let two = DatasetSplit::new(
            SplitName::Train,
            vec![
                rec("q1", "a", Role::Query),
                rec("q2", "a", Role::Query),
                rec("g1", "a", Role::Gallery),
                rec("g2", "a", Role::Gallery),
                rec("q3", "b", Role::Query),
                rec("g3", "b", Role::Gallery),
                rec("g4", "b", Role::Gallery),
            ],
        )
        .unwrap();
        assert_eq!(build_pair_instances(&two, 11).0, build_pair_instances(&two, 11).0);
    }

    #[test]
    fn players_without_query_are_skipped() {
        let split = DatasetSplit::new(
            SplitName::Train,
            vec![
                rec("q", "a", Role::Query),
                rec("g", "a", Role::Gallery),
                rec("g2", "b", Role::Gallery),
                rec("g3", "b", Role::Gallery),
            ],
        )
        .unwrap();
        assert_eq!(split.players_without_query().len(), 1);
        let (pairs, stats) = build_pair_instances(&split, 0);
        assert_eq!(pairs.len(), 1);
        assert_eq!(stats.skipped_players, 1);
        assert_eq!(stats.skipped_gallery_records, 2);
    }

    #[test]
    fn merge_rejects_duplicates() {
        let a = DatasetSplit::new(SplitName::Train, vec![rec("x", "a", Role::Query)]).unwrap();
        let b = DatasetSplit::new(SplitName::Test, vec![rec("y", "b", Role::Query)]).unwrap();
        let m = a.clone().merge(b).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.name, SplitName::Train);
        assert!(a.clone().merge(a).is_err());
    }

    #[test]
    fn attribute_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let header = "record_id,jersey_number,jersey_colour,sex,skin_colour\n";
        let mut body = header.to_string();
        for i in 0..100 {
            body.push_str(&format!("r{i},{},red,male,white\n", i % 32 + 1));
        }
        let p = write(dir.path(), "attrs.csv", &body);
        let m = load_attribute_annotations(&p, None).unwrap();
        assert_eq!(m.len(), 100);
        assert_eq!(m["r0"].label(Attribute::JerseyNumber), Some(0));
        assert_eq!(m["r0"].label(Attribute::JerseyColour), Some(4));

        let purple = write(dir.path(), "purple.csv", &format!("{header}r,3,purple,male,white\n"));
        assert!(load_attribute_annotations(&purple, None)
            .unwrap_err()
            .to_string()
            .contains("purple"));

        let absent = write(dir.path(), "absent.csv", &format!("{header}r,,blue,female,\n"));
        let m = load_attribute_annotations(&absent, None).unwrap();
        assert_eq!(m["r"].jersey_number, None);
        assert_eq!(m["r"].skin_colour, None);

        let empty = write(dir.path(), "empty.csv", "");
        assert!(load_attribute_annotations(&empty, None).unwrap().is_empty());
        let header_only = write(dir.path(), "h.csv", header);
        assert!(load_attribute_annotations(&header_only, None).unwrap().is_empty());

        let split = DatasetSplit::new(SplitName::Train, vec![rec("other", "a", Role::Query)]).unwrap();
        assert!(load_attribute_annotations(&absent, Some(&split)).is_err());
    }
}
