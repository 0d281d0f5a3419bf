//! Template grammar for the synthetic fact/query language.
//!
//! A [`Grammar`] bundles an [`EntityGazetteer`] with the registered
//! [`RelationSpec`]s, join templates and composite fact templates. Templates use
//! `$`-placeholders (`$S`, `$O`, `$PRO` for relation templates; `$A`, `$B`, `$C`
//! for composites). The same templates drive rendering in the generator and
//! matching in the oracle SPJ.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationFunction;

pub const BORN_IN_YEAR: &str = "bornInYear";
pub const BORN_IN_PLACE: &str = "bornInPlace";
pub const SPOUSE_OF: &str = "spouseOf";
pub const LIVES_IN: &str = "livesIn";
pub const EMPLOYED_AS: &str = "employedAs";
pub const FATHER_OF: &str = "fatherOf";
pub const MOTHER_OF: &str = "motherOf";
pub const LIKES: &str = "likes";
pub const BORDERS_COUNTRY: &str = "bordersCountry";
pub const USES_CURRENCY: &str = "usesCurrency";

/// The seven relations of a D1-style database.
pub const DEFAULT_RELATIONS: [&str; 7] = [
    BORN_IN_YEAR,
    BORN_IN_PLACE,
    SPOUSE_OF,
    LIVES_IN,
    EMPLOYED_AS,
    FATHER_OF,
    LIKES,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityClass {
    Person,
    /// Fictional first-name-only characters, disjoint from `Person`.
    Character,
    City,
    Country,
    Continent,
    Year,
    Job,
    Thing,
    Currency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn object_pronoun(self) -> &'static str {
        match self {
            Gender::Male => "him",
            Gender::Female => "her",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    LookupBool,
    LookupExtract,
    JoinBool,
    JoinExtract,
    Set,
    Count,
    Minmax,
}

impl QueryKind {
    pub const ALL: [QueryKind; 7] = [
        Self::LookupBool,
        Self::LookupExtract,
        Self::JoinBool,
        Self::JoinExtract,
        Self::Set,
        Self::Count,
        Self::Minmax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LookupBool => "lookup_bool",
            Self::LookupExtract => "lookup_extract",
            Self::JoinBool => "join_bool",
            Self::JoinExtract => "join_extract",
            Self::Set => "set",
            Self::Count => "count",
            Self::Minmax => "minmax",
        }
    }

    pub fn is_lookup(self) -> bool {
        matches!(self, Self::LookupBool | Self::LookupExtract)
    }

    pub fn is_join(self) -> bool {
        matches!(self, Self::JoinBool | Self::JoinExtract)
    }
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A (relation, subject, object) provenance triple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub relation: String,
    pub subject: String,
    pub object: String,
}

impl Triple {
    pub fn new(relation: &str, subject: &str, object: &str) -> Self {
        Self {
            relation: relation.to_string(),
            subject: subject.to_string(),
            object: object.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Min,
    Max,
}

/// Shape of a single-relation query template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum QueryShape {
    /// `$S` given; objects are the answers.
    Extract,
    /// `$S` and `$O` given; Boolean answer.
    Check,
    /// `$O` given; subjects are the answers.
    Inverse,
    CountInverse,
    CountExtract,
    /// Entity with the extreme numeric object.
    ArgExtreme(Direction),
    /// The extreme numeric object itself.
    ValueExtreme(Direction),
    /// Object value held by the most (fewest) subjects.
    GroupExtreme(Direction),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub text: String,
    pub shape: QueryShape,
    /// Only generated for subjects of this gender ("husband", "wife").
    pub subject_gender: Option<Gender>,
    /// Parse-only templates are understood but never generated.
    pub generate: bool,
}

impl QueryTemplate {
    fn new(text: &str, shape: QueryShape) -> Self {
        Self {
            text: text.to_string(),
            shape,
            subject_gender: None,
            generate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub name: String,
    pub subject_class: EntityClass,
    pub object_class: EntityClass,
    /// At most one object per subject.
    pub functional: bool,
    pub symmetric: bool,
    pub fact_templates: Vec<String>,
    pub query_templates: Vec<QueryTemplate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinShape {
    Extract,
    Check,
}

/// Query template chaining `first(S, X)` with `second(X, Y)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinTemplate {
    pub first: String,
    pub second: String,
    pub text: String,
    pub shape: JoinShape,
}

/// One sentence expressing several triples. `parts` reference slot names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositeTemplate {
    pub text: String,
    pub parts: Vec<(String, String, String)>,
    pub generate: bool,
}

/// Semantic form of a query, independent of its wording.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum QueryForm {
    Extract {
        relation: String,
        subject: String,
    },
    Check {
        relation: String,
        subject: String,
        object: String,
    },
    Inverse {
        relation: String,
        object: String,
    },
    CountInverse {
        relation: String,
        object: String,
    },
    CountExtract {
        relation: String,
        subject: String,
    },
    JoinExtract {
        first: String,
        second: String,
        subject: String,
    },
    JoinCheck {
        first: String,
        second: String,
        subject: String,
        object: String,
    },
    ArgExtreme {
        relation: String,
        direction: Direction,
    },
    ValueExtreme {
        relation: String,
        direction: Direction,
    },
    GroupExtreme {
        relation: String,
        direction: Direction,
    },
}

impl QueryForm {
    /// Relations the form reads.
    pub fn relations(&self) -> Vec<&str> {
        match self {
            QueryForm::Extract { relation, .. }
            | QueryForm::Check { relation, .. }
            | QueryForm::Inverse { relation, .. }
            | QueryForm::CountInverse { relation, .. }
            | QueryForm::CountExtract { relation, .. }
            | QueryForm::ArgExtreme { relation, .. }
            | QueryForm::ValueExtreme { relation, .. }
            | QueryForm::GroupExtreme { relation, .. } => vec![relation.as_str()],
            QueryForm::JoinExtract { first, second, .. }
            | QueryForm::JoinCheck { first, second, .. } => vec![first.as_str(), second.as_str()],
        }
    }

    /// Entities named in the query text.
    pub fn entities(&self) -> Vec<&str> {
        match self {
            QueryForm::Extract { subject, .. }
            | QueryForm::CountExtract { subject, .. }
            | QueryForm::JoinExtract { subject, .. } => vec![subject.as_str()],
            QueryForm::Check {
                subject, object, ..
            }
            | QueryForm::JoinCheck {
                subject, object, ..
            } => vec![subject.as_str(), object.as_str()],
            QueryForm::Inverse { object, .. } | QueryForm::CountInverse { object, .. } => {
                vec![object.as_str()]
            }
            _ => Vec::new(),
        }
    }
}

/// Query kind and aggregation label implied by a form.
pub fn form_kind(form: &QueryForm, grammar: &Grammar) -> (QueryKind, AggregationFunction) {
    use AggregationFunction as A;
    match form {
        QueryForm::Extract { relation, .. } => {
            let functional = grammar.relation(relation).is_some_and(|r| r.functional);
            if functional {
                (QueryKind::LookupExtract, A::NoAggregation)
            } else {
                (QueryKind::Set, A::NoAggregation)
            }
        }
        QueryForm::Check { .. } => (QueryKind::LookupBool, A::NoAggregation),
        QueryForm::Inverse { .. } => (QueryKind::Set, A::NoAggregation),
        QueryForm::CountInverse { .. } | QueryForm::CountExtract { .. } => {
            (QueryKind::Count, A::Count)
        }
        QueryForm::JoinExtract { .. } => (QueryKind::JoinExtract, A::NoAggregation),
        QueryForm::JoinCheck { .. } => (QueryKind::JoinBool, A::NoAggregation),
        QueryForm::ArgExtreme { direction, .. } | QueryForm::GroupExtreme { direction, .. } => (
            QueryKind::Minmax,
            match direction {
                Direction::Min => A::Argmin,
                Direction::Max => A::Argmax,
            },
        ),
        QueryForm::ValueExtreme { direction, .. } => (
            QueryKind::Minmax,
            match direction {
                Direction::Min => A::Min,
                Direction::Max => A::Max,
            },
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GrammarError {
    #[error("name {0:?} is used for more than one entity")]
    DuplicateName(String),
    #[error("relation {relation}: {message}")]
    BadRelation { relation: String, message: String },
    #[error("template index {index} out of range for {relation} ({len} templates)")]
    IndexOutOfRange {
        relation: String,
        index: usize,
        len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Place {
    pub country: String,
    pub continent: String,
}

/// Closed world of entity names. Every name denotes exactly one entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityGazetteer {
    pub people: Vec<(String, Gender)>,
    pub characters: Vec<String>,
    pub places: BTreeMap<String, Place>,
    pub jobs: Vec<String>,
    pub things: Vec<String>,
    pub currency_of: BTreeMap<String, String>,
    pub borders: Vec<(String, String)>,
    pub years: (i64, i64),
}

impl EntityGazetteer {
    pub fn standard() -> Self {
        let male = [
            "Nicholas", "Teuvo", "Mahesh", "John", "Gustavo", "Kyrone", "Pat", "Ahmed", "Bruno",
            "Carlos", "Dmitri", "Emeka", "Farid", "Giorgio", "Hiroshi", "Ivan", "Jamal", "Kenji",
            "Lars", "Mateo", "Nikhil", "Olaf", "Pedro", "Quentin", "Rafael", "Sanjay", "Tomas",
            "Umar", "Viktor", "Wei", "Xavier", "Yusuf", "Zoltan", "Anders", "Boris", "Cedric",
            "Dario", "Elias", "Fabio", "Gunnar", "Hamid", "Ismael", "Jasper", "Kwame", "Lorenzo",
            "Magnus", "Nils", "Oscar", "Pavel", "Rashid", "Stefan", "Tariq", "Ulrich", "Vikram",
            "Waleed", "Yannick", "Zubair", "Arjun", "Benedikt", "Cosmin", "Desmond", "Enzo",
            "Finn", "Gideon", "Hugo", "Idris", "Joaquin", "Kaito", "Leandro", "Marco", "Nando",
            "Paulo", "Rohan", "Soren", "Thiago", "Valentin", "Wolfgang", "Yosef", "Zane", "Aurelio",
            "Bastian", "Ciaran", "Dominik",
        ];
        let female = [
            "Sheryl", "Sue", "Mary", "Sarah", "Susan", "Kiara", "Ruth", "Mariah", "Alice",
            "Beatriz", "Chiara", "Daria", "Elena", "Fatima", "Greta", "Hana", "Ingrid", "Jana",
            "Keiko", "Leila", "Marta", "Nadia", "Olga", "Priya", "Quinn", "Rosa", "Sofia",
            "Tamara", "Uma", "Vera", "Wanda", "Ximena", "Yara", "Zara", "Amara", "Bianca",
            "Carmen", "Divya", "Esther", "Freya", "Gemma", "Helga", "Isla", "Julia", "Katya",
            "Lucia", "Mei", "Nia", "Oksana", "Petra", "Rania", "Signe", "Thandi", "Ursula",
            "Valeria", "Wren", "Yuki", "Zofia", "Anika", "Brigitte", "Celine", "Dalia", "Eva",
            "Farah", "Gloria", "Hilde", "Irene", "Jasmin", "Kamala", "Lena", "Maren", "Noor",
            "Ophelia", "Paloma", "Renata", "Selma", "Tova", "Vivian", "Yvonne", "Zaina", "Astrid",
            "Bettina", "Clara", "Delphine",
        ];
        let people = male
            .iter()
            .map(|n| (n.to_string(), Gender::Male))
            .chain(female.iter().map(|n| (n.to_string(), Gender::Female)))
            .collect();
        let characters = [
            "Blix", "Dorf", "Frell", "Gromp", "Jibbet", "Lumo", "Mibble", "Nox", "Pim", "Quorn",
            "Razzle", "Skeeve", "Tibble", "Vorn", "Wuzzle", "Yimmy", "Zib", "Bloop", "Fizwick",
            "Grumbo",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();

        let cities: &[(&str, &str, &str)] = &[
            ("Washington D.C.", "United States", "North America"),
            ("Huntsville", "United States", "North America"),
            ("Boston", "United States", "North America"),
            ("Chicago", "United States", "North America"),
            ("Seattle", "United States", "North America"),
            ("Denver", "United States", "North America"),
            ("Toronto", "Canada", "North America"),
            ("Vancouver", "Canada", "North America"),
            ("Guadalajara", "Mexico", "North America"),
            ("Monterrey", "Mexico", "North America"),
            ("Recife", "Brazil", "South America"),
            ("Curitiba", "Brazil", "South America"),
            ("Rosario", "Argentina", "South America"),
            ("Mendoza", "Argentina", "South America"),
            ("London", "United Kingdom", "Europe"),
            ("Manchester", "United Kingdom", "Europe"),
            ("Leeds", "United Kingdom", "Europe"),
            ("Lyon", "France", "Europe"),
            ("Marseille", "France", "Europe"),
            ("Toulouse", "France", "Europe"),
            ("Munich", "Germany", "Europe"),
            ("Hamburg", "Germany", "Europe"),
            ("Cologne", "Germany", "Europe"),
            ("Seville", "Spain", "Europe"),
            ("Valencia", "Spain", "Europe"),
            ("Turin", "Italy", "Europe"),
            ("Naples", "Italy", "Europe"),
            ("Antwerp", "Belgium", "Europe"),
            ("Ghent", "Belgium", "Europe"),
            ("Vienna", "Austria", "Europe"),
            ("Graz", "Austria", "Europe"),
            ("Ruskala", "Finland", "Europe"),
            ("Helsinki", "Finland", "Europe"),
            ("Tampere", "Finland", "Europe"),
            ("Krakow", "Poland", "Europe"),
            ("Gdansk", "Poland", "Europe"),
            ("Zurich", "Switzerland", "Europe"),
            ("Geneva", "Switzerland", "Europe"),
            ("Mumbai", "India", "Asia"),
            ("Pune", "India", "Asia"),
            ("Chennai", "India", "Asia"),
            ("Kolkata", "India", "Asia"),
            ("Chengdu", "China", "Asia"),
            ("Wuhan", "China", "Asia"),
            ("Osaka", "Japan", "Asia"),
            ("Kyoto", "Japan", "Asia"),
            ("Kathmandu", "Nepal", "Asia"),
            ("Pokhara", "Nepal", "Asia"),
            ("Cairo", "Egypt", "Africa"),
            ("Giza", "Egypt", "Africa"),
            ("Nairobi", "Kenya", "Africa"),
            ("Mombasa", "Kenya", "Africa"),
            ("Lagos", "Nigeria", "Africa"),
            ("Ibadan", "Nigeria", "Africa"),
            ("Perth", "Australia", "Oceania"),
            ("Brisbane", "Australia", "Oceania"),
        ];
        let places = cities
            .iter()
            .map(|(c, k, n)| {
                (
                    c.to_string(),
                    Place {
                        country: k.to_string(),
                        continent: n.to_string(),
                    },
                )
            })
            .collect();
        let currency_of = [
            ("United States", "Dollar"),
            ("Canada", "Canadian Dollar"),
            ("Mexico", "Mexican Peso"),
            ("Brazil", "Real"),
            ("Argentina", "Argentine Peso"),
            ("United Kingdom", "Pound"),
            ("France", "Euro"),
            ("Germany", "Euro"),
            ("Spain", "Euro"),
            ("Italy", "Euro"),
            ("Belgium", "Euro"),
            ("Austria", "Euro"),
            ("Finland", "Euro"),
            ("Poland", "Zloty"),
            ("Switzerland", "Franc"),
            ("India", "Rupee"),
            ("China", "Yuan"),
            ("Japan", "Yen"),
            ("Nepal", "Nepalese Rupee"),
            ("Egypt", "Egyptian Pound"),
            ("Kenya", "Shilling"),
            ("Nigeria", "Naira"),
            ("Australia", "Australian Dollar"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let borders = [
            ("France", "Spain"),
            ("France", "Belgium"),
            ("France", "Germany"),
            ("France", "Italy"),
            ("France", "Switzerland"),
            ("Germany", "Austria"),
            ("Germany", "Poland"),
            ("Germany", "Belgium"),
            ("Germany", "Switzerland"),
            ("Austria", "Italy"),
            ("Austria", "Switzerland"),
            ("Italy", "Switzerland"),
            ("India", "China"),
            ("India", "Nepal"),
            ("China", "Nepal"),
            ("United States", "Canada"),
            ("United States", "Mexico"),
            ("Brazil", "Argentina"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let jobs = [
            "driver", "doctor", "teacher", "nurse", "lawyer", "plumber", "baker", "carpenter",
            "pilot", "journalist", "chef", "farmer", "dentist", "painter", "sailor", "tailor",
            "banker", "programmer", "librarian", "musician",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let things = [
            "coffee", "tea", "espresso", "music", "chess", "painting", "hiking", "cheese", "jazz",
            "football", "poetry", "cycling", "knitting", "gardening", "sushi", "chocolate",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Self {
            people,
            characters,
            places,
            jobs,
            things,
            currency_of,
            borders,
            years: (1900, 2005),
        }
    }

    pub fn countries(&self) -> BTreeSet<&str> {
        self.places.values().map(|p| p.country.as_str()).collect()
    }

    pub fn continents(&self) -> BTreeSet<&str> {
        self.places.values().map(|p| p.continent.as_str()).collect()
    }

    pub fn currencies(&self) -> BTreeSet<&str> {
        self.currency_of.values().map(String::as_str).collect()
    }

    pub fn gender(&self, person: &str) -> Option<Gender> {
        self.people
            .iter()
            .find(|(n, _)| n == person)
            .map(|(_, g)| *g)
    }

    /// Every (name, class) pair, years excluded.
    pub fn named_entities(&self) -> Vec<(&str, EntityClass)> {
        let mut out: Vec<(&str, EntityClass)> = Vec::new();
        out.extend(self.people.iter().map(|(n, _)| (n.as_str(), EntityClass::Person)));
        out.extend(self.characters.iter().map(|n| (n.as_str(), EntityClass::Character)));
        out.extend(self.places.keys().map(|n| (n.as_str(), EntityClass::City)));
        out.extend(self.countries().into_iter().map(|n| (n, EntityClass::Country)));
        out.extend(self.continents().into_iter().map(|n| (n, EntityClass::Continent)));
        out.extend(self.jobs.iter().map(|n| (n.as_str(), EntityClass::Job)));
        out.extend(self.things.iter().map(|n| (n.as_str(), EntityClass::Thing)));
        out.extend(self.currencies().into_iter().map(|n| (n, EntityClass::Currency)));
        out
    }

    /// Checks the unique-names assumption.
    pub fn validate(&self) -> Result<(), GrammarError> {
        let mut seen = BTreeSet::new();
        for (name, _) in self.named_entities() {
            if !seen.insert(name.to_lowercase()) {
                return Err(GrammarError::DuplicateName(name.to_string()));
            }
        }
        Ok(())
    }

    /// Whether `region` (a city, country or continent) contains `city`.
    /// `None` when `city` is not a known city.
    pub fn region_contains(&self, region: &str, city: &str) -> Option<bool> {
        let place = self.places.get(city)?;
        Some(region == city || region == place.country || region == place.continent)
    }
}

#[derive(Debug)]
struct Pattern {
    regex: Regex,
    slots: Vec<String>,
}

/// Splits a template into literal and `$SLOT` pieces.
fn pieces(template: &str) -> Vec<(bool, String)> {
    let mut out = Vec::new();
    let mut lit = String::new();
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '$' && chars.peek().is_some_and(|n| n.is_ascii_uppercase()) {
            if !lit.is_empty() {
                out.push((false, std::mem::take(&mut lit)));
            }
            let mut name = String::new();
            while let Some(&n) = chars.peek() {
                if n.is_ascii_uppercase() || n.is_ascii_digit() {
                    name.push(n);
                    chars.next();
                } else {
                    break;
                }
            }
            out.push((true, name));
        } else {
            lit.push(c);
        }
    }
    if !lit.is_empty() {
        out.push((false, lit));
    }
    out
}

/// Placeholder names occurring in a template, in order.
pub fn placeholders(template: &str) -> Vec<String> {
    pieces(template)
        .into_iter()
        .filter(|(slot, _)| *slot)
        .map(|(_, n)| n)
        .collect()
}

/// Drops one trailing sentence mark. Abbreviation dots ("D.C.") may be lost;
/// entity lookup restores them.
fn strip_terminal(s: &str) -> &str {
    let s = s.trim();
    s.strip_suffix(['.', '?', '!']).unwrap_or(s).trim_end()
}

fn normalize_input(s: &str) -> String {
    strip_terminal(s)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn compile(template: &str) -> Pattern {
    let mut re = String::from("(?i)^");
    let mut slots = Vec::new();
    for (is_slot, text) in pieces(strip_terminal(template)) {
        if is_slot {
            if text == "PRO" {
                re.push_str("(?:him|her)");
            } else {
                re.push_str("(.+?)");
                slots.push(text);
            }
        } else {
            re.push_str(&regex::escape(&text));
        }
    }
    re.push('$');
    Pattern {
        regex: Regex::new(&re).expect("template compiles"),
        slots,
    }
}

fn captures(p: &Pattern, input: &str) -> Option<HashMap<String, String>> {
    let caps = p.regex.captures(input)?;
    Some(
        p.slots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), caps[i + 1].trim().to_string()))
            .collect(),
    )
}

/// Fills `$`-placeholders from `values`; `$PRO` comes from `pronoun`.
pub fn fill(template: &str, values: &HashMap<&str, &str>, pronoun: Option<Gender>) -> String {
    let mut out = String::new();
    for (is_slot, text) in pieces(template) {
        if !is_slot {
            out.push_str(&text);
        } else if text == "PRO" {
            out.push_str(pronoun.unwrap_or(Gender::Male).object_pronoun());
        } else {
            out.push_str(values.get(text.as_str()).copied().unwrap_or(""));
        }
    }
    out
}

/// A query matched against a registered template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedQuery {
    pub form: QueryForm,
    pub kind: QueryKind,
    pub agg: AggregationFunction,
}

#[derive(Debug)]
enum QueryPatternSource {
    Relation { relation: usize, template: usize },
    Join { template: usize },
}

#[derive(Debug)]
struct Compiled {
    fact_patterns: Vec<(usize, Pattern)>,
    composite_patterns: Vec<(usize, Pattern)>,
    query_patterns: Vec<(QueryPatternSource, Pattern)>,
}

/// Gazetteer plus relation, join and composite templates.
#[derive(Debug)]
pub struct Grammar {
    pub gazetteer: EntityGazetteer,
    pub relations: Vec<RelationSpec>,
    pub joins: Vec<JoinTemplate>,
    pub composites: Vec<CompositeTemplate>,
    entity_index: HashMap<String, (String, EntityClass)>,
    compiled: Compiled,
}

fn rel(
    name: &str,
    subject_class: EntityClass,
    object_class: EntityClass,
    functional: bool,
    symmetric: bool,
    facts: &[&str],
    queries: Vec<QueryTemplate>,
) -> RelationSpec {
    RelationSpec {
        name: name.to_string(),
        subject_class,
        object_class,
        functional,
        symmetric,
        fact_templates: facts.iter().map(|s| s.to_string()).collect(),
        query_templates: queries,
    }
}

fn q(text: &str, shape: QueryShape) -> QueryTemplate {
    QueryTemplate::new(text, shape)
}

fn standard_relations() -> Vec<RelationSpec> {
    use EntityClass as E;
    use QueryShape as S;
    let gendered = |text: &str, g: Gender| QueryTemplate {
        subject_gender: Some(g),
        ..q(text, S::Extract)
    };
    let parse_only = |text: &str, shape: QueryShape| QueryTemplate {
        generate: false,
        ..q(text, shape)
    };
    vec![
        rel(
            BORN_IN_YEAR,
            E::Person,
            E::Year,
            true,
            false,
            &[
                "$S was born in $O.",
                "In $O, $S was born.",
                "$S arrived in $O.",
                "$S came into this world in $O.",
                "$S first drew breath in $O.",
            ],
            vec![
                q("When was $S born?", S::Extract),
                q("In what year was $S born?", S::Extract),
                q("Was $S born in $O?", S::Check),
                q("Who is the oldest person?", S::ArgExtreme(Direction::Min)),
                q("Which person is the eldest?", S::ArgExtreme(Direction::Min)),
                q("Who is the youngest person?", S::ArgExtreme(Direction::Max)),
                q("Which person is the youngest?", S::ArgExtreme(Direction::Max)),
                q(
                    "What is the earliest year of arrival for any person?",
                    S::ValueExtreme(Direction::Min),
                ),
                q(
                    "What is the latest year of arrival for any person?",
                    S::ValueExtreme(Direction::Max),
                ),
                parse_only(
                    "Who is the oldest person in the database?",
                    S::ArgExtreme(Direction::Min),
                ),
                parse_only(
                    "Who is the youngest person in the database?",
                    S::ArgExtreme(Direction::Max),
                ),
            ],
        ),
        rel(
            BORN_IN_PLACE,
            E::Person,
            E::City,
            true,
            false,
            &[
                "$S's mum gave birth to $PRO in $O",
                "$O is the place of birth of $S.",
                "$S's birthplace is $O.",
                "$S was born in the city of $O.",
                "$S comes from $O.",
            ],
            vec![
                q("Where was $S born?", S::Extract),
                q("What is $S's birthplace?", S::Extract),
                q("Was $S born in $O?", S::Check),
                q("Who was born in $O?", S::Inverse),
                q("How many people were born in $O?", S::CountInverse),
            ],
        ),
        rel(
            SPOUSE_OF,
            E::Person,
            E::Person,
            true,
            true,
            &[
                "$S is $O's spouse.",
                "$S is married to $O.",
                "$S and $O are married.",
                "$S married $O.",
                "$S is the spouse of $O.",
            ],
            vec![
                q("Who is $S's spouse?", S::Extract),
                q("Who is $S married to?", S::Extract),
                gendered("Who is $S's husband?", Gender::Female),
                gendered("Who is $S's wife?", Gender::Male),
                q("Is $S married to $O?", S::Check),
            ],
        ),
        rel(
            LIVES_IN,
            E::Person,
            E::City,
            true,
            false,
            &[
                "$S lives in $O.",
                "$S resides in $O.",
                "$S's home is in $O.",
                "$S has a house in $O.",
                "$O is where $S lives.",
            ],
            vec![
                q("Where does $S live?", S::Extract),
                q("In which city does $S live?", S::Extract),
                q("Does $S live in $O?", S::Check),
                q("Who lives in $O?", S::Inverse),
                q("How many people live in $O?", S::CountInverse),
            ],
        ),
        rel(
            EMPLOYED_AS,
            E::Person,
            E::Job,
            true,
            false,
            &[
                "$S works as a $O.",
                "$S is employed as a $O.",
                "$S is a $O by profession.",
                "$S earns a living as a $O.",
                "$S has a job as a $O.",
            ],
            vec![
                q("What is $S's job?", S::Extract),
                q("What does $S do for a living?", S::Extract),
                q("Does $S work as a $O?", S::Check),
                q("Is $S a $O?", S::Check),
                q("Who works as a $O?", S::Inverse),
                q("How many people work as a $O?", S::CountInverse),
            ],
        ),
        rel(
            FATHER_OF,
            E::Person,
            E::Person,
            true,
            false,
            &[
                "$O is $S's father.",
                "$S's father is $O.",
                "$O is the father of $S.",
                "$S's dad is $O.",
                "$O fathered $S.",
            ],
            vec![
                q("Who is $S's father?", S::Extract),
                q("Is $O $S's father?", S::Check),
                q("Who are $O's children?", S::Inverse),
                q("How many kids does $O have?", S::CountInverse),
                q("How many children does $O have?", S::CountInverse),
            ],
        ),
        rel(
            MOTHER_OF,
            E::Person,
            E::Person,
            true,
            false,
            &[
                "$O is $S's mother.",
                "$S's mother is $O.",
                "$O is the mother of $S.",
                "$S's mom is $O.",
                "$O raised $S as her child.",
            ],
            vec![
                q("Who is $S's mother?", S::Extract),
                q("Is $O $S's mother?", S::Check),
            ],
        ),
        rel(
            LIKES,
            E::Character,
            E::Thing,
            false,
            false,
            &[
                "$S likes $O.",
                "$S enjoys $O.",
                "$S is fond of $O.",
                "$S loves $O.",
                "$S is really into $O.",
            ],
            vec![
                q("What does $S like?", S::Extract),
                q("Does $S like $O?", S::Check),
                q("Who likes $O?", S::Inverse),
                q("How many people like $O?", S::CountInverse),
                q("How many things does $S like?", S::CountExtract),
            ],
        ),
        rel(
            BORDERS_COUNTRY,
            E::Country,
            E::Country,
            false,
            true,
            &[
                "$S borders $O.",
                "$S shares a border with $O.",
                "$S and $O are neighbouring countries.",
                "There is a border between $S and $O.",
                "$S is adjacent to $O.",
            ],
            vec![
                q("Which countries border $S?", S::Extract),
                q("Does $S border $O?", S::Check),
                q("How many countries border $S?", S::CountExtract),
            ],
        ),
        rel(
            USES_CURRENCY,
            E::Country,
            E::Currency,
            true,
            false,
            &[
                "$S's currency is the $O.",
                "$S uses the $O.",
                "The $O is the currency of $S.",
                "In $S, people pay with the $O.",
                "$S has the $O as its currency.",
            ],
            vec![
                q("What currency does $S use?", S::Extract),
                q("Does $S use the $O?", S::Check),
                q("Which countries use the $O?", S::Inverse),
                q("How many countries use $O?", S::CountInverse),
                q("How many countries use the $O?", S::CountInverse),
                q(
                    "What is the most widely-used currency?",
                    S::GroupExtreme(Direction::Max),
                ),
            ],
        ),
    ]
}

fn standard_joins() -> Vec<JoinTemplate> {
    let j = |first: &str, second: &str, text: &str, shape| JoinTemplate {
        first: first.into(),
        second: second.into(),
        text: text.into(),
        shape,
    };
    use JoinShape::{Check, Extract};
    vec![
        j(SPOUSE_OF, LIVES_IN, "Does $S's spouse live in $O?", Check),
        j(SPOUSE_OF, LIVES_IN, "Where does $S's spouse live?", Extract),
        j(SPOUSE_OF, EMPLOYED_AS, "Does $S's spouse work as a $O?", Check),
        j(SPOUSE_OF, EMPLOYED_AS, "What is the job of $S's spouse?", Extract),
        j(SPOUSE_OF, BORN_IN_PLACE, "Where was $S's spouse born?", Extract),
        j(SPOUSE_OF, BORN_IN_PLACE, "Was $S's spouse born in $O?", Check),
        j(FATHER_OF, EMPLOYED_AS, "Does $S's father work as a $O?", Check),
        j(FATHER_OF, EMPLOYED_AS, "What does $S's father do for a living?", Extract),
        j(FATHER_OF, LIVES_IN, "Does $S's father live in $O?", Check),
        j(FATHER_OF, LIVES_IN, "Where does $S's father live?", Extract),
        j(FATHER_OF, BORN_IN_YEAR, "When was $S's father born?", Extract),
    ]
}

fn standard_composites() -> Vec<CompositeTemplate> {
    let c = |text: &str, parts: &[(&str, &str, &str)], generate: bool| CompositeTemplate {
        text: text.into(),
        parts: parts
            .iter()
            .map(|(r, s, o)| (r.to_string(), s.to_string(), o.to_string()))
            .collect(),
        generate,
    };
    let birth = [(BORN_IN_YEAR, "A", "B"), (BORN_IN_PLACE, "A", "C")];
    let work = [(EMPLOYED_AS, "A", "B"), (LIVES_IN, "A", "C")];
    vec![
        c("$A was born in $B in $C.", &birth, true),
        c("In $B, $A's mother gave birth to $PRO in $C.", &birth, true),
        c("$A works as a $B and lives in $C.", &work, true),
        c("$A is a $B living in $C.", &work, true),
        // Shared residence: one relation over two subjects. Understood, never generated.
        c(
            "$A lives in $C with $B.",
            &[(LIVES_IN, "A", "C"), (LIVES_IN, "B", "C")],
            false,
        ),
    ]
}

impl Grammar {
    /// Shared instance of the built-in grammar.
    pub fn standard() -> &'static Grammar {
        static STANDARD: OnceLock<Grammar> = OnceLock::new();
        STANDARD.get_or_init(|| {
            Grammar::new(
                EntityGazetteer::standard(),
                standard_relations(),
                standard_joins(),
                standard_composites(),
            )
            .expect("built-in grammar is valid")
        })
    }

    pub fn new(
        gazetteer: EntityGazetteer,
        relations: Vec<RelationSpec>,
        joins: Vec<JoinTemplate>,
        composites: Vec<CompositeTemplate>,
    ) -> Result<Self, GrammarError> {
        gazetteer.validate()?;
        for r in &relations {
            if r.fact_templates.len() < 2 {
                return Err(GrammarError::BadRelation {
                    relation: r.name.clone(),
                    message: "needs at least two fact templates".into(),
                });
            }
            for t in &r.fact_templates {
                let ph = placeholders(t);
                let count = |n: &str| ph.iter().filter(|p| *p == n).count();
                if count("S") != 1 || count("O") != 1 {
                    return Err(GrammarError::BadRelation {
                        relation: r.name.clone(),
                        message: format!("template {t:?} must contain $S and $O exactly once"),
                    });
                }
            }
        }
        let entity_index = gazetteer
            .named_entities()
            .into_iter()
            .map(|(n, c)| (n.to_lowercase(), (n.to_string(), c)))
            .collect();
        let mut fact_patterns = Vec::new();
        let mut query_patterns = Vec::new();
        for (ri, r) in relations.iter().enumerate() {
            for t in &r.fact_templates {
                fact_patterns.push((ri, compile(t)));
            }
            for (ti, t) in r.query_templates.iter().enumerate() {
                query_patterns.push((
                    QueryPatternSource::Relation {
                        relation: ri,
                        template: ti,
                    },
                    compile(&t.text),
                ));
            }
        }
        for (ji, j) in joins.iter().enumerate() {
            query_patterns.push((QueryPatternSource::Join { template: ji }, compile(&j.text)));
        }
        let composite_patterns = composites
            .iter()
            .enumerate()
            .map(|(i, c)| (i, compile(&c.text)))
            .collect();
        Ok(Self {
            gazetteer,
            relations,
            joins,
            composites,
            entity_index,
            compiled: Compiled {
                fact_patterns,
                composite_patterns,
                query_patterns,
            },
        })
    }

    pub fn relation(&self, name: &str) -> Option<&RelationSpec> {
        self.relations.iter().find(|r| r.name == name)
    }

    /// Canonical name and class of an entity mention (case-insensitive).
    /// Years in the gazetteer range resolve to [`EntityClass::Year`].
    pub fn entity_owned(&self, mention: &str) -> Option<(String, EntityClass)> {
        let key = mention.to_lowercase();
        if let Some((n, c)) = self
            .entity_index
            .get(&key)
            .or_else(|| self.entity_index.get(&format!("{key}.")))
        {
            return Some((n.clone(), *c));
        }
        let (lo, hi) = self.gazetteer.years;
        if mention.bytes().all(|b| b.is_ascii_digit()) {
            let y: i64 = mention.parse().ok()?;
            if (lo..=hi).contains(&y) {
                return Some((y.to_string(), EntityClass::Year));
            }
        }
        None
    }

    /// Whether a mention of class `given` can fill a slot of class `slot`.
    /// Regions (countries, continents) may stand in for cities.
    fn slot_accepts(slot: EntityClass, given: EntityClass) -> bool {
        slot == given
            || (slot == EntityClass::City
                && matches!(given, EntityClass::Country | EntityClass::Continent))
    }

    fn resolve(&self, mention: &str, class: EntityClass, allow_region: bool) -> Option<String> {
        let (name, c) = self.entity_owned(mention)?;
        let ok = if allow_region {
            Self::slot_accepts(class, c)
        } else {
            c == class
        };
        ok.then_some(name)
    }

    /// Renders relation fact template `index` for a subject/object pair.
    pub fn render_fact(
        &self,
        relation: &RelationSpec,
        subject: &str,
        object: &str,
        index: usize,
    ) -> Result<String, GrammarError> {
        let t = relation
            .fact_templates
            .get(index)
            .ok_or_else(|| GrammarError::IndexOutOfRange {
                relation: relation.name.clone(),
                index,
                len: relation.fact_templates.len(),
            })?;
        let values = HashMap::from([("S", subject), ("O", object)]);
        Ok(fill(t, &values, self.gazetteer.gender(subject)))
    }

    /// Recovers the triples a fact sentence expresses by matching it against the
    /// registered fact and composite templates.
    pub fn parse_fact(&self, text: &str) -> Option<Vec<Triple>> {
        let input = normalize_input(text);
        for (ri, p) in &self.compiled.fact_patterns {
            let r = &self.relations[*ri];
            let Some(caps) = captures(p, &input) else {
                continue;
            };
            let s = self.resolve(&caps["S"], r.subject_class, false);
            let o = self.resolve(&caps["O"], r.object_class, false);
            if let (Some(s), Some(o)) = (s, o) {
                return Some(vec![Triple::new(&r.name, &s, &o)]);
            }
        }
        'composite: for (ci, p) in &self.compiled.composite_patterns {
            let c = &self.composites[*ci];
            let Some(caps) = captures(p, &input) else {
                continue;
            };
            let mut triples = Vec::new();
            for (rname, sslot, oslot) in &c.parts {
                let Some(r) = self.relation(rname) else {
                    continue 'composite;
                };
                let s = self.resolve(&caps[sslot.as_str()], r.subject_class, false);
                let o = self.resolve(&caps[oslot.as_str()], r.object_class, false);
                match (s, o) {
                    (Some(s), Some(o)) => triples.push(Triple::new(rname, &s, &o)),
                    _ => continue 'composite,
                }
            }
            return Some(triples);
        }
        None
    }

    /// Matches a question against the registered query templates.
    pub fn parse_query(&self, text: &str) -> Option<ParsedQuery> {
        let input = normalize_input(text);
        for (src, p) in &self.compiled.query_patterns {
            let Some(caps) = captures(p, &input) else {
                continue;
            };
            let form = match src {
                QueryPatternSource::Relation { relation, template } => {
                    let r = &self.relations[*relation];
                    let t = &r.query_templates[*template];
                    self.relation_form(r, t.shape, &caps)
                }
                QueryPatternSource::Join { template } => {
                    let j = &self.joins[*template];
                    self.join_form(j, &caps)
                }
            };
            if let Some(form) = form {
                let (kind, agg) = form_kind(&form, self);
                return Some(ParsedQuery { form, kind, agg });
            }
        }
        None
    }

    fn relation_form(
        &self,
        r: &RelationSpec,
        shape: QueryShape,
        caps: &HashMap<String, String>,
    ) -> Option<QueryForm> {
        let subj = || self.resolve(caps.get("S")?, r.subject_class, false);
        let obj = |region: bool| self.resolve(caps.get("O")?, r.object_class, region);
        let relation = r.name.clone();
        Some(match shape {
            QueryShape::Extract => QueryForm::Extract {
                relation,
                subject: subj()?,
            },
            QueryShape::Check => QueryForm::Check {
                relation,
                subject: subj()?,
                object: obj(true)?,
            },
            QueryShape::Inverse => QueryForm::Inverse {
                relation,
                object: obj(true)?,
            },
            QueryShape::CountInverse => QueryForm::CountInverse {
                relation,
                object: obj(true)?,
            },
            QueryShape::CountExtract => QueryForm::CountExtract {
                relation,
                subject: subj()?,
            },
            QueryShape::ArgExtreme(direction) => QueryForm::ArgExtreme {
                relation,
                direction,
            },
            QueryShape::ValueExtreme(direction) => QueryForm::ValueExtreme {
                relation,
                direction,
            },
            QueryShape::GroupExtreme(direction) => QueryForm::GroupExtreme {
                relation,
                direction,
            },
        })
    }

    fn join_form(&self, j: &JoinTemplate, caps: &HashMap<String, String>) -> Option<QueryForm> {
        let first = self.relation(&j.first)?;
        let second = self.relation(&j.second)?;
        let subject = self.resolve(caps.get("S")?, first.subject_class, false)?;
        Some(match j.shape {
            JoinShape::Extract => QueryForm::JoinExtract {
                first: j.first.clone(),
                second: j.second.clone(),
                subject,
            },
            JoinShape::Check => QueryForm::JoinCheck {
                first: j.first.clone(),
                second: j.second.clone(),
                subject,
                object: self.resolve(caps.get("O")?, second.object_class, true)?,
            },
        })
    }

    /// Whether `value` satisfies the query object `target`, allowing a region
    /// to stand for any city inside it.
    pub fn object_matches(&self, value: &str, target: &str) -> bool {
        value == target || self.gazetteer.region_contains(target, value) == Some(true)
    }
}

/// Lowercased alphanumeric tokens, the same split the retrieval module uses.
pub fn template_tokens(template: &str) -> BTreeSet<String> {
    pieces(template)
        .into_iter()
        .filter(|(slot, _)| !*slot)
        .flat_map(|(_, lit)| {
            lit.split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(str::to_lowercase)
                .collect::<Vec<_>>()
        })
        .collect()
}
