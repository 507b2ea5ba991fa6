//! Synthetic movie-domain graph and templated dialogues over 1- and 2-hop paths.

use std::collections::{BTreeMap, BTreeSet};

use anyhow::{bail, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rho_core::kg::{KnowledgeGraph, NamedTriple};
use rho_core::prompting::{SampleRecord, Speaker, Utterance};
use serde::{Deserialize, Serialize};

pub const DIRECTED_BY: &str = "directed_by";
pub const STARRED_ACTORS: &str = "starred_actors";
pub const HAS_GENRE: &str = "has_genre";

const ADJECTIVES: &[&str] = &[
    "Silent", "Crimson", "Hidden", "Broken", "Golden", "Frozen", "Distant", "Electric", "Hollow", "Restless",
    "Burning", "Quiet", "Velvet", "Iron", "Lonely", "Wild", "Midnight", "Shattered", "Endless", "Secret",
];
const NOUNS: &[&str] = &[
    "Harbor", "Garden", "Signal", "Empire", "Orchard", "Horizon", "Lantern", "Canyon", "Voyage", "Mirror",
    "Station", "Kingdom", "Compass", "River", "Tower", "Meadow", "Circuit", "Frontier", "Island", "Winter",
];
const FIRST: &[&str] = &[
    "Ada", "Boris", "Clara", "Dmitri", "Elena", "Felix", "Greta", "Hugo", "Irene", "Jonas", "Katya", "Lars",
    "Mira", "Nils", "Olga", "Pavel", "Rosa", "Stefan", "Tilda", "Viktor", "Wanda", "Yuri", "Zora", "Anton",
];
const LAST: &[&str] = &[
    "Marlowe", "Castell", "Okafor", "Lindqvist", "Moreau", "Varga", "Brandt", "Sato", "Ferreira", "Novak",
    "Halloran", "Ibarra", "Quint", "Radev", "Solberg", "Tanaka", "Ulrich", "Weller", "Yilmaz", "Zeller",
];
const GENRES: &[&str] = &[
    "Drama", "Comedy", "Thriller", "Horror", "Fantasy", "Western", "Romance", "Mystery", "Animation", "Documentary",
    "Musical", "Noir",
];
const OPENERS: &[(&str, &str)] = &[
    ("I am looking for something to watch tonight.", "Sure, what have you seen lately?"),
    ("Can you help me pick a film?", "Of course, tell me what you like."),
    ("I had a long week and want a movie.", "Happy to help, any favorites?"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub entities: usize,
    pub samples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { entities: 50, samples: 300 }
    }
}

/// A generated graph and its train / valid / test dialogues.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub kg: KnowledgeGraph,
    pub train: Vec<SampleRecord>,
    pub valid: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl SynthData {
    pub fn all(&self) -> impl Iterator<Item = &SampleRecord> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

struct Cast {
    movies: Vec<String>,
    actors: Vec<String>,
    directors: Vec<String>,
    genres: Vec<String>,
}

fn draw_names(rng: &mut rho_core::Rng, n: usize, used: &mut BTreeSet<String>, make: impl Fn(&mut rho_core::Rng) -> String) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let name = make(rng);
        if used.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

fn cast(n: usize, rng: &mut rho_core::Rng) -> Cast {
    let genres = (n / 10).clamp(2, GENRES.len());
    let directors = (n * 3 / 20).max(2);
    let movies = (n * 2 / 5).max(3);
    let actors = n - genres - directors - movies;
    let mut used = BTreeSet::new();
    let movie = |r: &mut rho_core::Rng| format!("The {} {}", ADJECTIVES.choose(r).unwrap(), NOUNS.choose(r).unwrap());
    let person = |r: &mut rho_core::Rng| format!("{} {}", FIRST.choose(r).unwrap(), LAST.choose(r).unwrap());
    let mut g: Vec<String> = GENRES.iter().map(|s| s.to_string()).collect();
    g.shuffle(rng);
    g.truncate(genres);
    used.extend(g.iter().cloned());
    Cast {
        movies: draw_names(rng, movies, &mut used, movie),
        actors: draw_names(rng, actors, &mut used, person),
        directors: draw_names(rng, directors, &mut used, person),
        genres: g,
    }
}

fn build_graph(c: &Cast, rng: &mut rho_core::Rng) -> Vec<NamedTriple> {
    let mut triples = Vec::new();
    let mut actor_used = vec![false; c.actors.len()];
    for (i, m) in c.movies.iter().enumerate() {
        triples.push(NamedTriple::new(m, DIRECTED_BY, &c.directors[i % c.directors.len()]));
        if rng.gen_bool(0.3) {
            triples.push(NamedTriple::new(m, DIRECTED_BY, c.directors.choose(rng).unwrap()));
        }
        let k = rng.gen_range(2..=3).min(c.actors.len());
        let mut picks: Vec<usize> = (0..c.actors.len()).collect();
        picks.shuffle(rng);
        for &a in &picks[..k] {
            actor_used[a] = true;
            triples.push(NamedTriple::new(m, STARRED_ACTORS, &c.actors[a]));
        }
        let n_genres = rng.gen_range(1..=2);
        for g in c.genres.choose_multiple(rng, n_genres) {
            triples.push(NamedTriple::new(m, HAS_GENRE, g));
        }
    }
    for (a, used) in actor_used.iter().enumerate() {
        if !used {
            let m = c.movies.choose(rng).unwrap();
            triples.push(NamedTriple::new(m, STARRED_ACTORS, &c.actors[a]));
        }
    }
    let mut seen = BTreeSet::new();
    triples.retain(|t| seen.insert(t.clone()));
    triples
}

fn one_hop(t: &NamedTriple, rng: &mut rho_core::Rng) -> (String, String) {
    let (m, o) = (&t.subject, &t.object);
    let (question, answer) = match t.predicate.as_str() {
        DIRECTED_BY => {
            let q = [format!("Who directed {m}?"), format!("Do you know who made {m}?")];
            (q.choose(rng).unwrap().clone(), format!("{m} was directed by {o}."))
        }
        STARRED_ACTORS => {
            let q = [format!("Who is in {m}?"), format!("Which actors star in {m}?")];
            (q.choose(rng).unwrap().clone(), format!("{o} starred in {m}."))
        }
        _ => {
            let q = [format!("What kind of movie is {m}?"), format!("What genre is {m}?")];
            (q.choose(rng).unwrap().clone(), format!("{m} is a {o} movie."))
        }
    };
    if rng.gen_bool(0.5) {
        let q = [format!("Tell me about {m}."), format!("What do you know about {m}?")];
        (q.choose(rng).unwrap().clone(), answer)
    } else {
        (question, answer)
    }
}

fn two_hop(first: &NamedTriple, second: &NamedTriple, rng: &mut rho_core::Rng) -> (String, String) {
    let (m1, x, m2) = (&first.subject, &first.object, &second.subject);
    let q = [format!("I really liked {m1}. Anything similar?"), format!("I just watched {m1}. What should I see next?")];
    let answer = match first.predicate.as_str() {
        DIRECTED_BY => format!("{x} also directed {m2}."),
        STARRED_ACTORS => format!("{x} is also in {m2}."),
        _ => format!("{m2} is another {x} movie."),
    };
    (q.choose(rng).unwrap().clone(), answer)
}

/// Deterministic graph plus `samples` dialogues split 8:1:1.
pub fn synth(cfg: &SynthConfig, seed: u64) -> Result<SynthData> {
    if cfg.entities < 10 {
        bail!(rho_core::Error::InvalidConfig(format!("synth needs at least 10 entities, got {}", cfg.entities)));
    }
    if cfg.samples < 30 {
        bail!(rho_core::Error::InvalidConfig(format!("synth needs at least 30 samples, got {}", cfg.samples)));
    }
    let mut rng = rho_core::seeded_rng(seed);
    let c = cast(cfg.entities, &mut rng);
    let triples = build_graph(&c, &mut rng);
    let kg = KnowledgeGraph::from_named(&triples)?;

    let mut by_object: BTreeMap<(&str, &str), Vec<&NamedTriple>> = BTreeMap::new();
    for t in &triples {
        by_object.entry((t.predicate.as_str(), t.object.as_str())).or_default().push(t);
    }
    let bridges: Vec<&NamedTriple> =
        triples.iter().filter(|t| by_object[&(t.predicate.as_str(), t.object.as_str())].len() >= 2).collect();

    let mut records = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let mut history = Vec::new();
        if rng.gen_bool(0.5) {
            let (u, a) = OPENERS.choose(&mut rng).unwrap();
            history.push(Utterance::new(Speaker::User, *u));
            history.push(Utterance::new(Speaker::Assistant, *a));
        }
        let (question, response, path) = if !bridges.is_empty() && rng.gen_bool(0.5) {
            let first = *bridges.choose(&mut rng).unwrap();
            let siblings: Vec<&&NamedTriple> = by_object[&(first.predicate.as_str(), first.object.as_str())]
                .iter()
                .filter(|t| t.subject != first.subject)
                .collect();
            let second = **siblings.choose(&mut rng).unwrap();
            let (q, r) = two_hop(first, second, &mut rng);
            (q, r, vec![first.clone(), second.clone()])
        } else {
            let t = triples.choose(&mut rng).unwrap();
            let (q, r) = one_hop(t, &mut rng);
            (q, r, vec![t.clone()])
        };
        history.push(Utterance::new(Speaker::User, question));
        kg.validate_named_path(&path)?;
        records.push(SampleRecord { history, response: Some(response), path });
    }
    records.shuffle(&mut rng);
    let n_train = cfg.samples * 8 / 10;
    let n_valid = cfg.samples / 10;
    let test = records.split_off(n_train + n_valid);
    let valid = records.split_off(n_train);
    Ok(SynthData { kg, train: records, valid, test })
}
