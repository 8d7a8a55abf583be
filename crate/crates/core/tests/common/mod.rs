#![allow(dead_code)]

use cfq_core::genclient::{ChatTransport, GenerationRequest};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn cfq() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_cfq"))
}

pub fn fnv(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for p in parts {
        for b in p.iter().chain(&[0xff]) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// One authored caption with the relations it states.
pub struct Caption {
    pub id: &'static str,
    pub image: &'static str,
    pub text: &'static str,
    pub triples: &'static [(&'static str, &'static str, &'static str)],
}

pub const IMAGES: [&str; 8] = ["img01", "img02", "img03", "img04", "img05", "img06", "img07", "img08"];

pub const CAPTIONS: &[Caption] = &[
    Caption { id: "c01a", image: "img01", text: "A man rides a bike down a busy city street.", triples: &[("a man", "rides", "a bike"), ("a man", "rides down", "a busy city street")] },
    Caption { id: "c01b", image: "img01", text: "A cyclist in a red helmet passes parked cars.", triples: &[("a cyclist", "wears", "a red helmet"), ("a cyclist", "passes", "parked cars")] },
    Caption { id: "c02a", image: "img02", text: "Two children build a sandcastle on the beach.", triples: &[("two children", "build", "a sandcastle"), ("the sandcastle", "is on", "the beach")] },
    Caption { id: "c02b", image: "img02", text: "Kids play in the sand near the ocean.", triples: &[("kids", "play in", "the sand"), ("the sand", "is near", "the ocean")] },
    Caption { id: "c03a", image: "img03", text: "A family eats dinner around a wooden table.", triples: &[("a family", "eats", "dinner"), ("the family", "sits around", "a wooden table")] },
    Caption { id: "c03b", image: "img03", text: "People share a meal at home.", triples: &[("people", "share", "a meal")] },
    Caption { id: "c04a", image: "img04", text: "A dog catches a frisbee in a park.", triples: &[("a dog", "catches", "a frisbee"), ("the dog", "is in", "a park")] },
    Caption { id: "c04b", image: "img04", text: "A brown dog jumps over the grass.", triples: &[("a brown dog", "jumps over", "the grass")] },
    Caption { id: "c05a", image: "img05", text: "A woman sells fruit at a market stall.", triples: &[("a woman", "sells", "fruit"), ("the woman", "stands at", "a market stall")] },
    Caption { id: "c05b", image: "img05", text: "Shoppers browse baskets of oranges.", triples: &[("shoppers", "browse", "baskets of oranges")] },
    Caption { id: "c06a", image: "img06", text: "A skier glides down a snowy slope.", triples: &[("a skier", "glides down", "a snowy slope")] },
    Caption { id: "c06b", image: "img06", text: "A person in a blue jacket skis past pine trees.", triples: &[("a person", "wears", "a blue jacket"), ("the person", "skis past", "pine trees")] },
    Caption { id: "c07a", image: "img07", text: "A band plays music on an outdoor stage.", triples: &[("a band", "plays", "music"), ("the band", "is on", "an outdoor stage")] },
    Caption { id: "c07b", image: "img07", text: "A crowd watches a concert at night.", triples: &[("a crowd", "watches", "a concert")] },
    Caption { id: "c08a", image: "img08", text: "A man reads a newspaper on a park bench.", triples: &[("a man", "reads", "a newspaper"), ("the man", "sits on", "a park bench")] },
    Caption { id: "c08b", image: "img08", text: "An old man relaxes in the afternoon sun.", triples: &[("an old man", "relaxes in", "the afternoon sun")] },
];

pub const PHRASES: &[(&str, &str, &str)] = &[
    ("p01", "img01", "a red helmet"),
    ("p02", "img01", "a bike"),
    ("p03", "img02", "a sandcastle"),
    ("p04", "img03", "a wooden table"),
    ("p05", "img04", "a frisbee"),
    ("p06", "img05", "baskets of oranges"),
    ("p07", "img06", "a snowy slope"),
    ("p08", "img07", "an outdoor stage"),
    ("p09", "img08", "a park bench"),
    ("p10", "img08", "a newspaper"),
];

/// Scene and mood tags per image; mixed case and quoting exercise
/// normalization and the case-insensitive vocabulary.
pub fn image_tags(uri: &str) -> (&'static [&'static str], &'static [&'static str]) {
    let id = uri.trim_start_matches("images/").trim_end_matches(".jpg");
    match id {
        "img01" => (&["city commute", "urban cycling"], &["busy morning"]),
        "img02" => (&["beach day", "family outing"], &["\"Sunny Afternoon\"", "carefree fun"]),
        "img03" => (&["Family Gathering", "home dinner"], &["warm evening"]),
        "img04" => (&["park play", "pet activity"], &["sunny afternoon"]),
        "img05" => (&["market shopping", "street trade"], &["lively morning"]),
        "img06" => (&["winter sport"], &["cold morning", "Crisp Air."]),
        "img07" => (&["live music", "night event"], &["festive night"]),
        "img08" => (&["park rest", "quiet reading"], &["pleasant afternoon"]),
        _ => (&[], &[]),
    }
}

const DETAILS: [&str; 16] = [
    "the scene is outdoors in daylight",
    "several people can be seen in the background",
    "the colors are bright and warm",
    "there is motion in the picture",
    "the photo is taken from eye level",
    "a building stands in the distance",
    "trees frame the edges of the image",
    "the ground is partly in shadow",
    "someone is smiling at the camera",
    "the weather looks clear",
    "a small crowd has gathered",
    "the picture feels relaxed",
    "objects are scattered around",
    "the light comes from the left",
    "the setting looks familiar and everyday",
    "there is a lot of texture in the foreground",
];

fn between<'a>(s: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let i = s.find(start)? + start.len();
    let j = s[i..].find(end)? + i;
    Some(&s[i..j])
}

/// Deterministic replies for every prompt the built-in templates produce.
pub fn scripted_reply(r: &GenerationRequest) -> Result<String, String> {
    let system = r.system.as_deref().unwrap_or("");
    if let Some(uri) = &r.image_uri {
        let (scene, mood) = image_tags(uri);
        let tags = if r.prompt.contains("occasion or scene") { scene } else { mood };
        return Ok(tags.iter().enumerate().map(|(i, t)| format!("{}. {t}\n", i + 1)).collect());
    }
    if system.contains("relation triples") {
        let lines: Vec<Vec<&str>> = r.prompt.lines().filter(|l| l.contains(" | ")).map(|l| l.split(" | ").collect()).collect();
        let mut text = lines[0].join(" ");
        for l in &lines[1..] {
            text.push_str(&format!(" and {} {}", l[1], l[2]));
        }
        return Ok(text);
    }
    if system.contains("extract subject-predicate-object") {
        let caption = between(&r.prompt, "Caption: \"", "\"").ok_or("no caption")?;
        let c = CAPTIONS.iter().find(|c| c.text == caption).ok_or_else(|| format!("unknown caption {caption}"))?;
        return Ok(c.triples.iter().map(|(s, p, o)| format!("{s} | {p} | {o}\n")).collect());
    }
    let query = between(&r.prompt, "query: \"", "\".").ok_or("unrecognized prompt")?;
    let h = fnv(&[query.as_bytes()]);
    // Some queries get an empty first attempt on batch 2 to exercise retries.
    if h.is_multiple_of(5) && r.batch_tag == 2 {
        return Ok(String::new());
    }
    let start = fnv(&[query.as_bytes(), &r.batch_tag.to_le_bytes()]) as usize;
    let mut out = String::new();
    for i in 0..10 {
        // Steps of 7 through 16 details repeat after 16, so later lines can
        // duplicate earlier batches but never within one batch.
        let d = DETAILS[(start + 7 * i) % DETAILS.len()];
        out.push_str(&format!("{}. In a photo of {}, {d}.\n", i + 1, query.trim_end_matches('.').to_lowercase()));
    }
    Ok(out)
}

pub struct ScriptedTransport {
    pub calls: Arc<AtomicUsize>,
}

impl ScriptedTransport {
    pub fn new() -> (Self, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        (ScriptedTransport { calls: calls.clone() }, calls)
    }
}

impl ChatTransport for ScriptedTransport {
    fn complete(&self, request: &GenerationRequest) -> Result<String, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        scripted_reply(request)
    }

    fn supports_images(&self) -> bool {
        true
    }
}
