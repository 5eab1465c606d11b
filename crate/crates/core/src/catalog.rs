//! Synthetic product catalog: grammar-driven product titles plus a synonym
//! table that introduces a lexical gap between how users phrase queries and
//! how titles are written.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Canonical text form of a token list: tokens joined by a single space.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

pub type ProductId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Product {
    pub id: ProductId,
    pub title: String,
    pub tokens: Vec<String>,
    pub attributes: BTreeMap<String, String>,
}

impl Product {
    pub fn new(id: ProductId, title: String, attributes: BTreeMap<String, String>) -> Self {
        let tokens = tokenize(&title);
        Self {
            id,
            title,
            tokens,
            attributes,
        }
    }

    pub fn attr(&self, slot: &str) -> Option<&str> {
        self.attributes.get(slot).map(String::as_str)
    }
}

/// Symmetric, transitively closed synonym relation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymTable {
    synonyms: BTreeMap<String, BTreeSet<String>>,
    class: BTreeMap<String, String>,
}

impl SynonymTable {
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut adjacency: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (a, b) in pairs {
            let (a, b) = (a.into(), b.into());
            if a == b {
                continue;
            }
            adjacency.entry(a.clone()).or_default().insert(b.clone());
            adjacency.entry(b).or_default().insert(a);
        }
        // close each connected component
        let mut synonyms = BTreeMap::new();
        let mut class = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for start in adjacency.keys() {
            if seen.contains(start) {
                continue;
            }
            let mut members = BTreeSet::new();
            let mut stack = vec![start.clone()];
            while let Some(tok) = stack.pop() {
                if members.insert(tok.clone()) {
                    stack.extend(adjacency[&tok].iter().cloned());
                }
            }
            let representative = members.iter().next().cloned().unwrap_or_default();
            for m in &members {
                seen.insert(m.clone());
                class.insert(m.clone(), representative.clone());
                let others: BTreeSet<String> = members.iter().filter(|o| *o != m).cloned().collect();
                synonyms.insert(m.clone(), others);
            }
        }
        Self { synonyms, class }
    }

    pub fn is_empty(&self) -> bool {
        self.synonyms.is_empty()
    }

    pub fn synonyms_of(&self, token: &str) -> impl Iterator<Item = &str> {
        self.synonyms
            .get(token)
            .into_iter()
            .flat_map(|s| s.iter().map(String::as_str))
    }

    /// Equivalence-class representative; tokens without synonyms are their own class.
    pub fn class_of<'a>(&'a self, token: &'a str) -> &'a str {
        self.class.get(token).map(String::as_str).unwrap_or(token)
    }

    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        self.class_of(a) == self.class_of(b)
    }

    /// All `(token, synonym)` pairs in both directions, sorted.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.synonyms
            .iter()
            .flat_map(|(t, s)| s.iter().map(move |o| (t.as_str(), o.as_str())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogConfig {
    pub brands: usize,
    pub categories: usize,
    pub modifiers: usize,
    /// Fraction of grammar tokens that receive a query-side alias.
    pub synonym_fraction: f64,
    /// Probability that a title writes an aliased category or modifier by its
    /// alias. Brand aliases never reach titles.
    pub title_alias_rate: f64,
    pub seed: u64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            brands: 16,
            categories: 16,
            modifiers: 16,
            synonym_fraction: 0.6,
            title_alias_rate: 0.4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub products: Vec<Product>,
    pub synonyms: SynonymTable,
    pub seed: u64,
    title_vocab: BTreeSet<String>,
}

const BRANDS: &[(&str, &str)] = &[
    ("kappa", "kapa"),
    ("newbalance", "nb"),
    ("xiaomi", "mi"),
    ("puma", "pooma"),
    ("anta", "antasports"),
    ("lining", "ln"),
    ("adidas", "addidas"),
    ("huawei", "hw"),
    ("lenovo", "lnv"),
    ("midea", "meidi"),
    ("haier", "hair"),
    ("fila", "feila"),
];

const CATEGORIES: &[(&str, &str)] = &[
    ("bag", "backpack"),
    ("jacket", "coat"),
    ("shoe", "sneaker"),
    ("cup", "mug"),
    ("pad", "tablet"),
    ("lamp", "light"),
    ("kettle", "boiler"),
    ("watch", "timepiece"),
    ("towel", "washcloth"),
    ("pipe", "tube"),
    ("phone", "mobile"),
    ("sofa", "couch"),
];

const MODIFIERS: &[(&str, &str)] = &[
    ("waterproof", "rainproof"),
    ("mini", "small"),
    ("kids", "children"),
    ("down", "puffer"),
    ("classic", "retro"),
    ("portable", "travel"),
    ("wireless", "cordless"),
    ("winter", "thermal"),
    ("sports", "athletic"),
    ("ceramic", "porcelain"),
];

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ren", "to", "va", "zu", "qi", "bor", "sen", "da", "fy", "gen", "hu", "jo",
];

fn synth_word(rng: &mut impl Rng, taken: &BTreeSet<String>) -> String {
    loop {
        let n = rng.gen_range(2..=3);
        let word: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap_or(&"ka")).collect();
        if !taken.contains(&word) {
            return word;
        }
    }
}

fn slot_words(
    list: &[(&str, &str)],
    n: usize,
    rng: &mut impl Rng,
    taken: &mut BTreeSet<String>,
) -> Vec<(String, String)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (word, alias) = match list.get(i) {
            Some((w, a)) => (w.to_string(), a.to_string()),
            None => {
                let w = synth_word(rng, taken);
                taken.insert(w.clone());
                let a = synth_word(rng, taken);
                (w, a)
            }
        };
        taken.insert(word.clone());
        taken.insert(alias.clone());
        out.push((word, alias));
    }
    out
}

/// Builds the brand × category × modifier catalog.
pub fn generate_catalog(config: &CatalogConfig) -> Result<Catalog> {
    if config.brands == 0 || config.categories == 0 || config.modifiers == 0 {
        return Err(Error::EmptyGrammar("brands, categories and modifiers must be >= 1"));
    }
    for (name, value) in [
        ("synonym_fraction", config.synonym_fraction),
        ("title_alias_rate", config.title_alias_rate),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidArgument(format!("{name} {value} outside [0, 1]")));
        }
    }
    let mut rng = seed::stream(config.seed, "catalog");
    let mut taken: BTreeSet<String> = BRANDS
        .iter()
        .chain(CATEGORIES)
        .chain(MODIFIERS)
        .flat_map(|(w, a)| [w.to_string(), a.to_string()])
        .collect();
    let brands = slot_words(BRANDS, config.brands, &mut rng, &mut taken);
    let categories = slot_words(CATEGORIES, config.categories, &mut rng, &mut taken);
    let modifiers = slot_words(MODIFIERS, config.modifiers, &mut rng, &mut taken);

    let mut pool: Vec<(String, String)> = brands.iter().chain(&categories).chain(&modifiers).cloned().collect();
    pool.shuffle(&mut rng);
    let n_syn = (config.synonym_fraction * pool.len() as f64).round() as usize;
    pool.truncate(n_syn);
    let alias: BTreeMap<String, String> = pool.iter().cloned().collect();
    let synonyms = SynonymTable::from_pairs(pool);

    let mut combos = Vec::with_capacity(config.brands * config.categories * config.modifiers);
    for (b, _) in &brands {
        for (c, _) in &categories {
            for (m, _) in &modifiers {
                combos.push((b.clone(), c.clone(), m.clone()));
            }
        }
    }
    // decouple id order (and thus BM25 tie-breaks) from grammar order
    combos.shuffle(&mut rng);
    let mut surface = |word: &String| match alias.get(word) {
        Some(a) if rng.gen::<f64>() < config.title_alias_rate => a.clone(),
        _ => word.clone(),
    };
    let products = combos
        .into_iter()
        .enumerate()
        .map(|(i, (b, c, m))| {
            let title = format!("{b} {} {}", surface(&m), surface(&c));
            let attributes = BTreeMap::from([
                ("brand".to_string(), b),
                ("category".to_string(), c),
                ("modifier".to_string(), m),
            ]);
            Product::new(i as ProductId, title, attributes)
        })
        .collect();

    Ok(Catalog::new(products, synonyms, config.seed))
}

impl Catalog {
    pub fn new(products: Vec<Product>, synonyms: SynonymTable, seed: u64) -> Self {
        let title_vocab = products.iter().flat_map(|p| p.tokens.iter().cloned()).collect();
        Self {
            products,
            synonyms,
            seed,
            title_vocab,
        }
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    /// Products are stored densely with `id == position` for generated catalogs;
    /// loaded catalogs fall back to a search.
    pub fn product(&self, id: ProductId) -> Option<&Product> {
        match self.products.get(id as usize) {
            Some(p) if p.id == id => Some(p),
            _ => self.products.iter().find(|p| p.id == id),
        }
    }

    pub fn in_titles(&self, token: &str) -> bool {
        self.title_vocab.contains(token)
    }

    /// Title-side surface form of a token: the token itself if it occurs in a
    /// title, otherwise its smallest synonym that does.
    pub fn title_form<'a>(&'a self, token: &'a str) -> &'a str {
        if self.in_titles(token) {
            return token;
        }
        self.synonyms
            .synonyms_of(token)
            .find(|s| self.in_titles(s))
            .unwrap_or(token)
    }

    /// Query rewritten into title-side vocabulary.
    pub fn canonicalize(&self, query: &str) -> String {
        tokenize(query)
            .iter()
            .map(|t| self.title_form(t).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Query widened with every title-side synonym of its tokens, the way a
    /// production engine with a synonym dictionary matches.
    pub fn expand(&self, query: &str) -> String {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for t in tokenize(query) {
            let forms = std::iter::once(t.as_str()).chain(self.synonyms.synonyms_of(&t));
            for f in forms.filter(|f| self.in_titles(f)) {
                if seen.insert(f.to_string()) {
                    out.push(f.to_string());
                }
            }
        }
        out.join(" ")
    }

    /// Every token that can appear in queries or titles, sorted.
    pub fn all_tokens(&self) -> BTreeSet<String> {
        let mut all = self.title_vocab.clone();
        for (a, b) in self.synonyms.pairs() {
            all.insert(a.to_string());
            all.insert(b.to_string());
        }
        all
    }

    /// Values of an attribute slot in first-seen order of product id.
    pub fn slot_values(&self, slot: &str) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut products: Vec<&Product> = self.products.iter().collect();
        products.sort_by_key(|p| p.id);
        products
            .into_iter()
            .filter_map(|p| p.attr(slot))
            .filter(|v| seen.insert(v.to_string()))
            .map(str::to_string)
            .collect()
    }

    /// `id<TAB>title<TAB>attr_json` lines ordered by id.
    pub fn to_tsv(&self) -> String {
        let mut products: Vec<&Product> = self.products.iter().collect();
        products.sort_by_key(|p| p.id);
        let mut out = String::new();
        for p in products {
            let attrs = serde_json::to_string(&p.attributes).unwrap_or_else(|_| "{}".into());
            let _ = writeln!(out, "{}\t{}\t{}", p.id, p.title, attrs);
        }
        out
    }

    /// `token<TAB>synonym` lines, both directions, sorted.
    pub fn synonyms_to_tsv(&self) -> String {
        let mut out = String::new();
        for (a, b) in self.synonyms.pairs() {
            let _ = writeln!(out, "{a}\t{b}");
        }
        out
    }

    pub fn from_tsv(catalog: &str, synonyms: &str, seed: u64) -> Result<Self> {
        let mut products = Vec::new();
        let mut ids = BTreeSet::new();
        for (lineno, line) in catalog.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(title), Some(attrs)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Malformed(format!("catalog line {}: expected 3 fields", lineno + 1)));
            };
            let id: ProductId = id
                .parse()
                .map_err(|_| Error::Malformed(format!("catalog line {}: bad id {id:?}", lineno + 1)))?;
            if !ids.insert(id) {
                return Err(Error::Malformed(format!("catalog line {}: duplicate id {id}", lineno + 1)));
            }
            let attributes: BTreeMap<String, String> = serde_json::from_str(attrs)
                .map_err(|e| Error::Malformed(format!("catalog line {}: {e}", lineno + 1)))?;
            products.push(Product::new(id, title.to_string(), attributes));
        }
        let mut pairs = Vec::new();
        for (lineno, line) in synonyms.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let Some((a, b)) = line.split_once('\t') else {
                return Err(Error::Malformed(format!("synonym line {}: expected 2 fields", lineno + 1)));
            };
            pairs.push((a.to_string(), b.to_string()));
        }
        Ok(Self::new(products, SynonymTable::from_pairs(pairs), seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Kappa School-Bag"), ["kappa", "school", "bag"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("NB  down jacket"), ["nb", "down", "jacket"]);
    }

    #[test]
    fn grammar_product_cardinality() {
        let cfg = CatalogConfig {
            brands: 2,
            categories: 2,
            modifiers: 1,
            synonym_fraction: 0.0,
            title_alias_rate: 0.3,
            seed: 7,
        };
        let cat = generate_catalog(&cfg).unwrap();
        assert_eq!(cat.len(), 4);
        let again = generate_catalog(&cfg).unwrap();
        assert_eq!(cat.to_tsv(), again.to_tsv());
        assert_eq!(cat.synonyms_to_tsv(), again.synonyms_to_tsv());
    }

    #[test]
    fn zero_size_grammar_is_rejected() {
        let cfg = CatalogConfig {
            brands: 0,
            ..CatalogConfig::default()
        };
        assert!(matches!(generate_catalog(&cfg), Err(Error::EmptyGrammar(_))));
    }

    #[test]
    fn synonyms_open_a_lexical_gap() {
        let cfg = CatalogConfig {
            brands: 3,
            categories: 3,
            modifiers: 2,
            synonym_fraction: 0.5,
            title_alias_rate: 0.3,
            seed: 11,
        };
        let cat = generate_catalog(&cfg).unwrap();
        let gap: Vec<_> = cat
            .synonyms
            .pairs()
            .filter(|(a, b)| !cat.in_titles(a) && cat.in_titles(b))
            .collect();
        assert!(!gap.is_empty());
        for (alias, title_side) in gap {
            assert_eq!(cat.title_form(alias), title_side);
        }
    }

    #[test]
    fn synonym_relation_is_symmetric() {
        let cat = generate_catalog(&CatalogConfig::default()).unwrap();
        for (a, b) in cat.synonyms.pairs() {
            assert!(cat.synonyms.synonyms_of(b).any(|s| s == a));
            assert!(cat.synonyms.are_synonyms(a, b));
        }
    }

    #[test]
    fn tokens_match_titles_and_ids_unique() {
        let cat = generate_catalog(&CatalogConfig::default()).unwrap();
        let mut ids = BTreeSet::new();
        for p in &cat.products {
            assert!(ids.insert(p.id));
            assert_eq!(p.tokens, tokenize(&p.title));
            assert!(!p.attributes.is_empty());
            assert_eq!(cat.product(p.id), Some(p));
        }
    }

    #[test]
    fn tsv_round_trip() {
        let cat = generate_catalog(&CatalogConfig::default()).unwrap();
        let back = Catalog::from_tsv(&cat.to_tsv(), &cat.synonyms_to_tsv(), cat.seed).unwrap();
        assert_eq!(back, cat);
    }

    #[test]
    fn expand_lists_every_title_form() {
        let products = ["kappa bag", "kappa backpack", "puma shoe"]
            .iter()
            .enumerate()
            .map(|(i, t)| Product::new(i as ProductId, t.to_string(), BTreeMap::from([("s".into(), "x".into())])))
            .collect();
        let cat = Catalog::new(products, SynonymTable::from_pairs([("backpack", "bag"), ("sneaker", "shoe")]), 0);
        assert_eq!(cat.expand("kappa backpack"), "kappa backpack bag");
        assert_eq!(cat.expand("sneaker sneaker"), "shoe");
        assert_eq!(cat.expand("nike"), "");
        assert_eq!(cat.canonicalize("sneaker"), "shoe");
    }

    #[test]
    fn title_aliases_spare_brands() {
        let base = CatalogConfig {
            brands: 6,
            categories: 6,
            modifiers: 6,
            synonym_fraction: 1.0,
            title_alias_rate: 0.0,
            seed: 3,
        };
        let plain = generate_catalog(&base).unwrap();
        let aliased = generate_catalog(&CatalogConfig {
            title_alias_rate: 1.0,
            ..base
        })
        .unwrap();
        assert_eq!(plain.len(), aliased.len());
        let brands: BTreeSet<String> = plain.slot_values("brand").into_iter().collect();
        let mut swapped = 0;
        for (p, q) in plain.products.iter().zip(&aliased.products) {
            assert_eq!(p.attributes, q.attributes);
            for (a, b) in p.tokens.iter().zip(&q.tokens) {
                if a != b {
                    assert!(!brands.contains(a), "brand {a} was aliased");
                    assert!(aliased.synonyms.are_synonyms(a, b));
                    swapped += 1;
                }
            }
        }
        assert!(swapped > 0);
    }

    #[test]
    fn malformed_catalog_line() {
        assert!(matches!(
            Catalog::from_tsv("0\tred cup\n", "", 0),
            Err(Error::Malformed(_))
        ));
    }
}
