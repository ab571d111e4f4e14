//! Two-granularity token inventories and the coarse-to-fine lexicon.
//!
//! The fine inventory holds pronunciation-bearing units (plus the CTC blank at
//! index 0 and a reserved silence token at index 1); the coarse inventory
//! holds semantic-bearing units with BOS/EOS/UNK specials at indices 0..3.
//! The two index spaces are disjoint namespaces: nothing converts between
//! them except an explicit lexicon expansion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// CTC blank, always index 0 of the fine inventory.
pub const BLANK_TOKEN: &str = "<blk>";
/// Reserved fine token substituted when an aligned text would be all blank.
pub const SILENCE_TOKEN: &str = "sil";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

pub const BLANK_ID: usize = 0;
pub const SILENCE_ID: usize = 1;
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;

/// The fine and coarse token alphabets.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitInventory {
    fine_tokens: Vec<String>,
    coarse_tokens: Vec<String>,
    fine_index: HashMap<String, usize>,
    coarse_index: HashMap<String, usize>,
}

impl UnitInventory {
    /// Build and validate an inventory. `fine_tokens` must start with
    /// `<blk>, sil`; `coarse_tokens` must start with `<bos>, <eos>, <unk>`;
    /// the fine inventory must be strictly smaller than the coarse one.
    pub fn new(fine_tokens: Vec<String>, coarse_tokens: Vec<String>) -> Result<Self> {
        if fine_tokens.first().map(String::as_str) != Some(BLANK_TOKEN) {
            return Err(Error::Config(format!(
                "fine inventory must start with `{BLANK_TOKEN}`"
            )));
        }
        if fine_tokens.get(SILENCE_ID).map(String::as_str) != Some(SILENCE_TOKEN) {
            return Err(Error::Config(format!(
                "fine inventory must reserve index {SILENCE_ID} for `{SILENCE_TOKEN}`"
            )));
        }
        let specials = [BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];
        for (i, tok) in specials.iter().enumerate() {
            if coarse_tokens.get(i).map(String::as_str) != Some(*tok) {
                return Err(Error::Config(format!(
                    "coarse inventory must reserve index {i} for `{tok}`"
                )));
            }
        }
        if fine_tokens.len() >= coarse_tokens.len() {
            return Err(Error::Config(format!(
                "granularity ordering violated: |fine| = {} must be < |coarse| = {}",
                fine_tokens.len(),
                coarse_tokens.len()
            )));
        }
        let fine_index = index_of(&fine_tokens, "fine")?;
        let coarse_index = index_of(&coarse_tokens, "coarse")?;
        Ok(Self {
            fine_tokens,
            coarse_tokens,
            fine_index,
            coarse_index,
        })
    }

    pub fn n_fine(&self) -> usize {
        self.fine_tokens.len()
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse_tokens.len()
    }

    pub fn blank_id(&self) -> usize {
        BLANK_ID
    }

    pub fn fine_tokens(&self) -> &[String] {
        &self.fine_tokens
    }

    pub fn coarse_tokens(&self) -> &[String] {
        &self.coarse_tokens
    }

    pub fn fine_token(&self, id: usize) -> Result<&str> {
        self.fine_tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::IndexOutOfRange {
                space: "fine",
                index: id,
                size: self.fine_tokens.len(),
            })
    }

    pub fn coarse_token(&self, id: usize) -> Result<&str> {
        self.coarse_tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::IndexOutOfRange {
                space: "coarse",
                index: id,
                size: self.coarse_tokens.len(),
            })
    }

    pub fn fine_id(&self, token: &str) -> Option<usize> {
        self.fine_index.get(token).copied()
    }

    pub fn coarse_id(&self, token: &str) -> Option<usize> {
        self.coarse_index.get(token).copied()
    }

    /// Encode fine labels; the fine side has no UNK, so unknown labels error.
    pub fn encode_fine<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.fine_id(l.as_ref()).ok_or_else(|| Error::UnknownToken {
                    space: "fine",
                    token: l.as_ref().to_string(),
                })
            })
            .collect()
    }

    /// Encode coarse labels, substituting UNK for unknown ones. Returns the
    /// ids and the number of UNK substitutions made.
    pub fn encode_coarse<S: AsRef<str>>(&self, labels: &[S]) -> (Vec<usize>, usize) {
        let mut unk_count = 0;
        let ids = labels
            .iter()
            .map(|l| match self.coarse_id(l.as_ref()) {
                Some(id) => id,
                None => {
                    unk_count += 1;
                    UNK_ID
                }
            })
            .collect();
        (ids, unk_count)
    }

    pub fn decode_fine(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| self.fine_token(id).map(str::to_string))
            .collect()
    }

    pub fn decode_coarse(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| self.coarse_token(id).map(str::to_string))
            .collect()
    }

    /// Write an inventory file: one token per line, UTF-8, LF-terminated.
    pub fn write_tokens(path: &Path, tokens: &[String]) -> Result<()> {
        let mut out = String::new();
        for tok in tokens {
            out.push_str(tok);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_tokens(path: &Path) -> Result<Vec<String>> {
        let text = std::fs::read_to_string(path)?;
        Ok(text.lines().map(str::to_string).collect())
    }

    pub fn write_files(&self, fine_path: &Path, coarse_path: &Path) -> Result<()> {
        Self::write_tokens(fine_path, &self.fine_tokens)?;
        Self::write_tokens(coarse_path, &self.coarse_tokens)
    }

    pub fn read_files(fine_path: &Path, coarse_path: &Path) -> Result<Self> {
        Self::new(Self::read_tokens(fine_path)?, Self::read_tokens(coarse_path)?)
    }
}

fn index_of(tokens: &[String], space: &str) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        if index.insert(tok.clone(), i).is_some() {
            return Err(Error::Config(format!(
                "duplicate {space} token `{tok}`"
            )));
        }
    }
    Ok(index)
}

/// Deterministic coarse-to-fine expansion table, keyed by coarse id.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<usize, Vec<usize>>,
}

impl Lexicon {
    pub fn new(entries: BTreeMap<usize, Vec<usize>>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.entries
    }

    pub fn entry(&self, coarse_id: usize) -> Option<&[usize]> {
        self.entries.get(&coarse_id).map(Vec::as_slice)
    }

    /// Check that every non-special coarse token has a non-empty entry of
    /// valid, non-blank fine ids.
    pub fn validate_complete(&self, inv: &UnitInventory) -> Result<()> {
        for id in 3..inv.n_coarse() {
            let entry = self.entries.get(&id).ok_or_else(|| {
                Error::LexiconMiss(inv.coarse_token(id).unwrap_or("?").to_string())
            })?;
            if entry.is_empty() {
                return Err(Error::Config(format!(
                    "empty lexicon entry for `{}`",
                    inv.coarse_token(id)?
                )));
            }
            for &f in entry {
                if f == BLANK_ID || f >= inv.n_fine() {
                    return Err(Error::Config(format!(
                        "lexicon entry for `{}` contains invalid fine id {f}",
                        inv.coarse_token(id)?
                    )));
                }
            }
        }
        Ok(())
    }

    /// Expand a coarse id sequence to the concatenation of per-token fine
    /// expansions. Specials (BOS/EOS/UNK) expand to the empty sequence; any
    /// other id without an entry is a `LexiconMiss`.
    pub fn expand_to_fine(&self, inv: &UnitInventory, coarse_seq: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for &c in coarse_seq {
            if c == BOS_ID || c == EOS_ID || c == UNK_ID {
                continue;
            }
            match self.entries.get(&c) {
                Some(fine) => out.extend_from_slice(fine),
                None => {
                    let name = inv
                        .coarse_token(c)
                        .map(str::to_string)
                        .unwrap_or_else(|_| format!("#{c}"));
                    return Err(Error::LexiconMiss(name));
                }
            }
        }
        Ok(out)
    }

    /// Write `COARSE<TAB>F1 F2 ...` lines, UTF-8, LF-terminated, in coarse-id
    /// order.
    pub fn write_file(&self, path: &Path, inv: &UnitInventory) -> Result<()> {
        let mut out = String::new();
        for (&c, fine) in &self.entries {
            let tokens: Vec<&str> = fine
                .iter()
                .map(|&f| inv.fine_token(f))
                .collect::<Result<_>>()?;
            writeln!(out, "{}\t{}", inv.coarse_token(c)?, tokens.join(" "))
                .expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_file(path: &Path, inv: &UnitInventory) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (coarse, fines) = line.split_once('\t').ok_or(Error::Parse {
                line: i + 1,
                msg: "expected COARSE<TAB>F1 F2 ...".to_string(),
            })?;
            let c = inv.coarse_id(coarse).ok_or(Error::Parse {
                line: i + 1,
                msg: format!("unknown coarse token `{coarse}`"),
            })?;
            let fine_ids = fines
                .split_whitespace()
                .map(|f| {
                    inv.fine_id(f).ok_or(Error::Parse {
                        line: i + 1,
                        msg: format!("unknown fine token `{f}`"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            entries.insert(c, fine_ids);
        }
        Ok(Self { entries })
    }
}

/// Generate a toy inventory plus lexicon: `n_fine` pronunciation units named
/// `p00..`, `n_coarse` words named `w000..`, each word mapping to 1..=3 fine
/// units with no two words sharing an expansion (so expansion is invertible,
/// which the rescoring tests rely on).
pub fn generate_inventory(
    n_fine: usize,
    n_coarse: usize,
    rng: &mut impl rand::Rng,
) -> Result<(UnitInventory, Lexicon)> {
    if n_fine < 2 {
        return Err(Error::Config("n_fine must be at least 2".to_string()));
    }
    let mut fine_tokens = vec![BLANK_TOKEN.to_string(), SILENCE_TOKEN.to_string()];
    fine_tokens.extend((0..n_fine).map(|i| format!("p{i:02}")));
    let mut coarse_tokens = vec![
        BOS_TOKEN.to_string(),
        EOS_TOKEN.to_string(),
        UNK_TOKEN.to_string(),
    ];
    coarse_tokens.extend((0..n_coarse).map(|i| format!("w{i:03}")));
    let inv = UnitInventory::new(fine_tokens, coarse_tokens)?;

    // Fine ids usable by the lexicon: everything past blank and sil.
    let first_usable = SILENCE_ID + 1;
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut entries = BTreeMap::new();
    for c in 3..inv.n_coarse() {
        let mut attempts = 0;
        let expansion = loop {
            let len = rng.gen_range(1..=3usize);
            let cand: Vec<usize> = (0..len)
                .map(|_| rng.gen_range(first_usable..inv.n_fine()))
                .collect();
            if seen.insert(cand.clone()) {
                break cand;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(format!(
                    "cannot build {n_coarse} homograph-free entries over {n_fine} fine units"
                )));
            }
        };
        entries.insert(c, expansion);
    }
    let lex = Lexicon::new(entries);
    lex.validate_complete(&inv)?;
    Ok((inv, lex))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_inventory() -> UnitInventory {
        UnitInventory::new(
            vec![
                BLANK_TOKEN.into(),
                SILENCE_TOKEN.into(),
                "A".into(),
                "B".into(),
                "C".into(),
            ],
            vec![
                BOS_TOKEN.into(),
                EOS_TOKEN.into(),
                UNK_TOKEN.into(),
                "AB".into(),
                "C".into(),
                "XY".into(),
            ],
        )
        .unwrap()
    }

    fn tiny_lexicon(inv: &UnitInventory) -> Lexicon {
        let mut entries = BTreeMap::new();
        entries.insert(
            inv.coarse_id("AB").unwrap(),
            vec![inv.fine_id("A").unwrap(), inv.fine_id("B").unwrap()],
        );
        entries.insert(inv.coarse_id("C").unwrap(), vec![inv.fine_id("C").unwrap()]);
        // "XY" deliberately left without an entry.
        Lexicon::new(entries)
    }

    #[test]
    fn expand_applies_entries_in_order() {
        let inv = tiny_inventory();
        let lex = tiny_lexicon(&inv);
        let seq = vec![inv.coarse_id("AB").unwrap(), inv.coarse_id("C").unwrap()];
        let fine = lex.expand_to_fine(&inv, &seq).unwrap();
        assert_eq!(inv.decode_fine(&fine).unwrap(), vec!["A", "B", "C"]);
    }

    #[test]
    fn expand_empty_is_identity() {
        let inv = tiny_inventory();
        let lex = tiny_lexicon(&inv);
        assert_eq!(lex.expand_to_fine(&inv, &[]).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn expand_missing_entry_names_the_token() {
        let inv = tiny_inventory();
        let lex = tiny_lexicon(&inv);
        let seq = vec![inv.coarse_id("XY").unwrap()];
        match lex.expand_to_fine(&inv, &seq) {
            Err(Error::LexiconMiss(tok)) => assert_eq!(tok, "XY"),
            other => panic!("expected LexiconMiss, got {other:?}"),
        }
    }

    #[test]
    fn specials_expand_to_nothing() {
        let inv = tiny_inventory();
        let lex = tiny_lexicon(&inv);
        let seq = vec![BOS_ID, inv.coarse_id("C").unwrap(), EOS_ID, UNK_ID];
        let fine = lex.expand_to_fine(&inv, &seq).unwrap();
        assert_eq!(inv.decode_fine(&fine).unwrap(), vec!["C"]);
    }

    #[test]
    fn unknown_coarse_becomes_unk_with_warning_count() {
        let inv = tiny_inventory();
        let (ids, unk_count) = inv.encode_coarse(&["zzz"]);
        assert_eq!(ids, vec![UNK_ID]);
        assert_eq!(unk_count, 1);
    }

    #[test]
    fn decode_out_of_range_errors() {
        let inv = tiny_inventory();
        let bad = inv.n_coarse() + 5;
        match inv.decode_coarse(&[bad]) {
            Err(Error::IndexOutOfRange { index, .. }) => assert_eq!(index, bad),
            other => panic!("expected IndexOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn generated_inventory_is_complete_and_homograph_free() {
        let mut rng = crate::rng::stream(11, "vocab-test");
        let (inv, lex) = generate_inventory(12, 40, &mut rng).unwrap();
        assert_eq!(inv.n_fine(), 14);
        assert_eq!(inv.n_coarse(), 43);
        assert!(inv.n_fine() < inv.n_coarse());
        lex.validate_complete(&inv).unwrap();
        let mut seen = HashSet::new();
        for entry in lex.entries().values() {
            assert!(!entry.is_empty() && entry.len() <= 3);
            assert!(seen.insert(entry.clone()), "homograph: {entry:?}");
        }
        // Expansion length equals the sum of entry lengths.
        let seq: Vec<usize> = (3..inv.n_coarse()).collect();
        let total: usize = seq.iter().map(|c| lex.entry(*c).unwrap().len()).sum();
        assert_eq!(lex.expand_to_fine(&inv, &seq).unwrap().len(), total);
    }

    #[test]
    fn inventory_and_lexicon_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::rng::stream(3, "vocab-io");
        let (inv, lex) = generate_inventory(8, 20, &mut rng).unwrap();
        let fine = dir.path().join("fine.vocab");
        let coarse = dir.path().join("coarse.vocab");
        let lexicon = dir.path().join("lexicon.txt");
        inv.write_files(&fine, &coarse).unwrap();
        lex.write_file(&lexicon, &inv).unwrap();
        let inv2 = UnitInventory::read_files(&fine, &coarse).unwrap();
        let lex2 = Lexicon::read_file(&lexicon, &inv2).unwrap();
        assert_eq!(inv, inv2);
        assert_eq!(lex, lex2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn coarse_round_trip_is_identity(raw in proptest::collection::vec(0usize..37, 0..20)) {
            let mut rng = crate::rng::stream(5, "vocab-prop");
            let (inv, _) = generate_inventory(12, 40, &mut rng).unwrap();
            let ids: Vec<usize> = raw.iter().map(|r| 3 + (r % (inv.n_coarse() - 3))).collect();
            let labels = inv.decode_coarse(&ids).unwrap();
            let (back, unk_count) = inv.encode_coarse(&labels);
            prop_assert_eq!(back, ids);
            prop_assert_eq!(unk_count, 0);
        }

        #[test]
        fn fine_round_trip_is_identity(raw in proptest::collection::vec(0usize..12, 0..30)) {
            let mut rng = crate::rng::stream(5, "vocab-prop");
            let (inv, _) = generate_inventory(12, 40, &mut rng).unwrap();
            let ids: Vec<usize> = raw.iter().map(|r| 2 + (r % (inv.n_fine() - 2))).collect();
            let labels = inv.decode_fine(&ids).unwrap();
            let back = inv.encode_fine(&labels).unwrap();
            prop_assert_eq!(back, ids);
        }
    }
}
