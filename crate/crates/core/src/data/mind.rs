//! MIND-style TSV files.
//!
//! * `news.tsv`: id, category, subcategory, title, abstract, url, title
//!   entities, abstract entities.
//! * `providers.tsv`: news id, provider name.
//! * `behaviors_{train,valid,test}.tsv`: impression id, user id, time,
//!   space-separated history ids, space-separated `newsID-label` candidates.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Corpus, Impression, NewsArticle, ProviderTable, Split, Vocab, DEFAULT_MIN_FREQ};
use crate::{Error, Result};

/// File names of a corpus directory.
pub struct FILES;

impl FILES {
    pub const NEWS: &'static str = "news.tsv";
    pub const PROVIDERS: &'static str = "providers.tsv";
    pub const TRAIN: &'static str = "behaviors_train.tsv";
    pub const VALID: &'static str = "behaviors_valid.tsv";
    pub const TEST: &'static str = "behaviors_test.tsv";
    pub const GROUND_TRUTH: &'static str = "ground_truth.tsv";

    pub fn behaviors(split: Split) -> &'static str {
        match split {
            Split::Train => Self::TRAIN,
            Split::Valid => Self::VALID,
            Split::Test => Self::TEST,
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub struct LoadedNews {
    pub news: Vec<NewsArticle>,
    pub vocab: Vocab,
    pub providers: ProviderTable,
    /// News absent from the provider map (assigned the unknown bucket).
    pub unmapped: usize,
}

/// Reads news and the provider map and builds the vocabulary from the
/// titles.
pub fn load_news(path: &Path, provider_map_path: &Path) -> Result<LoadedNews> {
    let map_text = read(provider_map_path)?;
    let mut provider_of: HashMap<String, String> = HashMap::new();
    for (i, line) in map_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        match (cols.next(), cols.next()) {
            (Some(id), Some(name)) if !id.is_empty() && !name.is_empty() => {
                provider_of.insert(id.to_string(), name.to_string());
            }
            _ => return Err(parse_err(provider_map_path, i + 1, "expected `news_id<TAB>provider`")),
        }
    }

    let text = read(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 || cols[0].is_empty() {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected at least 4 tab-separated columns, found {}", cols.len()),
            ));
        }
        rows.push((cols[0], cols[1], cols[2], cols[3]));
    }

    let providers = ProviderTable::from_names(
        rows.iter()
            .filter_map(|r| provider_of.get(r.0).cloned()),
    );
    let vocab = Vocab::build(rows.iter().map(|r| r.3), DEFAULT_MIN_FREQ);
    let mut unmapped = 0;
    let mut seen = HashMap::new();
    let mut news = Vec::with_capacity(rows.len());
    for (i, (id, cat, sub, title)) in rows.into_iter().enumerate() {
        if seen.insert(id, i).is_some() {
            return Err(Error::Data(format!("duplicate news id {id} in {}", path.display())));
        }
        let provider = match provider_of.get(id) {
            Some(name) => providers.id(name).expect("provider table built from map"),
            None => {
                unmapped += 1;
                providers.unknown_id()
            }
        };
        news.push(NewsArticle {
            id: id.to_string(),
            category: cat.to_string(),
            subcategory: sub.to_string(),
            title: title.to_string(),
            tokens: vocab.encode(title),
            provider,
        });
    }
    Ok(LoadedNews {
        news,
        vocab,
        providers,
        unmapped,
    })
}

/// Parses a behaviors file against an already-loaded news table.
pub fn load_behaviors(path: &Path, corpus: &Corpus) -> Result<Vec<Impression>> {
    let text = read(path)?;
    let mut out = Vec::new();
    let lookup = |id: &str, line: usize| {
        corpus
            .news_idx(id)
            .ok_or_else(|| parse_err(path, line, format!("unknown news id {id}")))
    };
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(parse_err(path, lineno, format!("expected 5 columns, found {}", cols.len())));
        }
        let history = cols[3]
            .split_whitespace()
            .map(|id| lookup(id, lineno))
            .collect::<Result<Vec<_>>>()?;
        let mut candidates = Vec::new();
        for tok in cols[4].split_whitespace() {
            let (id, label) = tok
                .rsplit_once('-')
                .ok_or_else(|| parse_err(path, lineno, format!("candidate {tok:?} lacks a -label suffix")))?;
            let clicked = match label {
                "1" => true,
                "0" => false,
                other => {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("candidate {tok:?} has label {other:?}, expected 0 or 1"),
                    ))
                }
            };
            candidates.push((lookup(id, lineno)?, clicked));
        }
        out.push(Impression {
            id: cols[0].to_string(),
            user: cols[1].to_string(),
            time: cols[2].to_string(),
            history,
            candidates,
        });
    }
    Ok(out)
}

impl Corpus {
    /// Loads `news.tsv`, `providers.tsv` and the three behaviors files from
    /// `dir`. Missing validation/test files yield empty splits.
    pub fn load_dir(dir: &Path) -> Result<Corpus> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
            ));
        }
        let loaded = load_news(&dir.join(FILES::NEWS), &dir.join(FILES::PROVIDERS))?;
        let mut corpus = Corpus::new(loaded.news, loaded.vocab, loaded.providers, loaded.unmapped);
        corpus.train = load_behaviors(&dir.join(FILES::TRAIN), &corpus)?;
        for split in [Split::Valid, Split::Test] {
            let path = dir.join(FILES::behaviors(split));
            if path.exists() {
                let imps = load_behaviors(&path, &corpus)?;
                match split {
                    Split::Valid => corpus.valid = imps,
                    _ => corpus.test = imps,
                }
            }
        }
        corpus.validate()?;
        Ok(corpus)
    }
}

fn news_tsv(corpus: &Corpus) -> String {
    let mut s = String::new();
    for n in &corpus.news {
        writeln!(s, "{}\t{}\t{}\t{}\t\t\t[]\t[]", n.id, n.category, n.subcategory, n.title).unwrap();
    }
    s
}

fn providers_tsv(corpus: &Corpus) -> String {
    let mut s = String::new();
    for n in &corpus.news {
        if n.provider < corpus.providers.len() {
            writeln!(s, "{}\t{}", n.id, corpus.providers.name(n.provider)).unwrap();
        }
    }
    s
}

fn behaviors_tsv(corpus: &Corpus, imps: &[Impression]) -> String {
    let mut s = String::new();
    for imp in imps {
        let hist: Vec<&str> = imp.history.iter().map(|&i| corpus.news[i].id.as_str()).collect();
        let cands: Vec<String> = imp
            .candidates
            .iter()
            .map(|&(i, c)| format!("{}-{}", corpus.news[i].id, u8::from(c)))
            .collect();
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            imp.id,
            imp.user,
            imp.time,
            hist.join(" "),
            cands.join(" ")
        )
        .unwrap();
    }
    s
}

/// Writes the five corpus files into `dir` and returns their names.
pub fn write_mind_dir(corpus: &Corpus, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (FILES::NEWS, news_tsv(corpus)),
        (FILES::PROVIDERS, providers_tsv(corpus)),
        (FILES::TRAIN, behaviors_tsv(corpus, &corpus.train)),
        (FILES::VALID, behaviors_tsv(corpus, &corpus.valid)),
        (FILES::TEST, behaviors_tsv(corpus, &corpus.test)),
    ];
    let mut names = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        names.push(name.to_string());
    }
    Ok(names)
}

/// Writes `user<TAB>news<TAB>relevance` rows.
pub fn write_ground_truth(rows: &[(String, String, f64)], path: &Path) -> Result<()> {
    let mut s = String::new();
    for (u, n, r) in rows {
        writeln!(s, "{u}\t{n}\t{r}").unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn parses_news_line() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "news.tsv", "N1\tsports\tsoccer\tTeam wins final\tabs\turl\t[]\t[]\nN2\tnews\tus\tTeam loses\t\t\t[]\t[]\n");
        write(dir.path(), "p.tsv", "N1\tESPN\n");
        let loaded = load_news(&dir.path().join("news.tsv"), &dir.path().join("p.tsv")).unwrap();
        let n1 = &loaded.news[0];
        let words: Vec<&str> = n1.tokens.iter().map(|&t| loaded.vocab.word(t).unwrap()).collect();
        // only "team" reaches min frequency 2
        assert_eq!(words, vec!["team", "<unk>", "<unk>"]);
        assert_eq!(n1.provider, 0);
        assert_eq!(loaded.news[1].provider, 1);
        assert_eq!(loaded.unmapped, 1);
        assert_eq!(crate::data::tokenize(&n1.title), vec!["team", "wins", "final"]);
    }

    #[test]
    fn malformed_news_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "news.tsv", "N1\ta\tb\tTitle\n\nN2\tonly-two\n");
        write(dir.path(), "p.tsv", "");
        let err = load_news(&dir.path().join("news.tsv"), &dir.path().join("p.tsv"))
            .err()
            .unwrap();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    fn small_corpus(dir: &Path) -> Corpus {
        write(dir, "news.tsv", "N1\tc\ts\ta b\t\t\t[]\t[]\nN5\tc\ts\ta c\t\t\t[]\t[]\n");
        write(dir, "providers.tsv", "N1\tP\nN5\tQ\n");
        let loaded = load_news(&dir.join("news.tsv"), &dir.join("providers.tsv")).unwrap();
        Corpus::new(loaded.news, loaded.vocab, loaded.providers, loaded.unmapped)
    }

    #[test]
    fn behaviors_labels_and_empty_history() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus(dir.path());
        write(dir.path(), "b.tsv", "1\tU1\t11/11/2019 9:05:58 AM\t\tN5-1 N1-0\n");
        let imps = load_behaviors(&dir.path().join("b.tsv"), &corpus).unwrap();
        assert!(imps[0].history.is_empty());
        assert_eq!(imps[0].candidates, vec![(1, true), (0, false)]);
    }

    #[test]
    fn bad_label_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus(dir.path());
        write(dir.path(), "b.tsv", "1\tU1\tt\tN1\tN5-2\n");
        let err = load_behaviors(&dir.path().join("b.tsv"), &corpus).unwrap_err();
        assert!(err.to_string().contains("N5-2"), "{err}");
        write(dir.path(), "b.tsv", "1\tU1\tt\tN9\tN5-1\n");
        assert!(load_behaviors(&dir.path().join("b.tsv"), &corpus).is_err());
    }
}
