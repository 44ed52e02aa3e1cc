//! Seeded synthetic hub populations in the detail-document shape the mock
//! hub serves and the record parser reads.

use chrono::{DateTime, Duration, SecondsFormat, TimeZone, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const TASK_TAGS: &[&str] = &[
    "text-generation",
    "text-classification",
    "token-classification",
    "fill-mask",
    "translation",
    "image-classification",
    "object-detection",
    "image-segmentation",
    "automatic-speech-recognition",
    "audio-classification",
    "text-to-speech",
    "reinforcement-learning",
    "image-to-text",
    "visual-question-answering",
];
const AUX_TAGS: &[&str] = &["en", "license:mit", "license:apache-2.0", "pytorch", "safetensors", "autotrain_compatible"];
const LIBRARIES: &[&str] = &["transformers", "diffusers", "timm", "stable-baselines3", "sentence-transformers"];
const MESSAGES: &[&str] = &[
    "fix tokenizer crash on empty input",
    "Fix typo in README",
    "bug fix for generation config",
    "update to transformers 4.35",
    "migrate weights to safetensors",
    "upgrade dependency versions",
    "add evaluation results",
    "improve model card",
    "refactor preprocessing",
    "Upload folder using huggingface_hub",
    "initial commit",
    "Update README.md",
];
const TITLES: &[&str] = &["License question", "Error loading model", "Add citation", "Quantized version?"];

/// Timestamp before which every fixture model was created.
pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 1, 1, 0, 0, 0).unwrap()
}

fn ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn sha_for(id: &str, k: usize) -> String {
    hex::encode(&Sha256::digest(format!("{id}#{k}").as_bytes())[..20])
}

/// `n` detail documents, identical for identical `(n, seed)`. Ids are
/// `org<k>/model-<i>`; last-modified times fall within 2023.
pub fn generate(n: usize, seed: u64) -> Vec<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| document(i, &mut rng)).collect()
}

fn document(i: usize, rng: &mut ChaCha8Rng) -> Value {
    let id = format!("org{:02}/model-{i:05}", i % 37);
    let created = epoch() + Duration::seconds(rng.random_range(0..180 * 86_400));
    let modified = created + Duration::seconds(rng.random_range(0..180 * 86_400));

    let mut tags: Vec<&str> = vec![TASK_TAGS.choose(rng).expect("non-empty")];
    if rng.random_bool(0.15) {
        tags.push(TASK_TAGS.choose(rng).expect("non-empty"));
    }
    if rng.random_bool(0.05) {
        tags.clear();
    }
    tags.extend(AUX_TAGS.iter().filter(|_| rng.random_bool(0.4)));

    let mut card = format!("# {id}\n\nA fixture model.\n");
    if rng.random_bool(0.5) {
        card += &format!("\naccuracy: {:.3}\n", rng.random_range(0.5..0.99));
    }
    if rng.random_bool(0.3) {
        card += &format!("F1 {:.1}\n", rng.random_range(40.0..95.0));
    }
    let co2 = rng.random_bool(0.3).then(|| {
        let emissions = (rng.random_range(1.0..5000.0f64) * 10.0).round() / 10.0;
        let hardware = ["A100", "V100", "T4"].choose(rng).copied();
        let region = ["us-east-1", "eu-west-1"].choose(rng).copied();
        json!({"emissions": emissions, "unit": "g", "hardware_used": hardware, "geographical_location": region})
    });

    let commits: Vec<Value> = (0..rng.random_range(0..7usize))
        .map(|k| {
            let at = created + Duration::seconds(rng.random_range(0..=(modified - created).num_seconds()));
            let message = MESSAGES.choose(rng).copied();
            json!({"sha": sha_for(&id, k), "message": message, "timestamp": ts(at)})
        })
        .collect();
    let titles: Vec<&str> = (0..rng.random_range(0..4usize)).map(|_| *TITLES.choose(rng).expect("non-empty")).collect();
    let downloads = (rng.random_range(0.0..14.0f64)).exp().floor() as u64;

    let mut doc = json!({
        "id": id,
        "createdAt": ts(created),
        "lastModified": ts(modified),
        "downloads": downloads,
        "likes": downloads / rng.random_range(20..200u64),
        "tags": tags,
        "card": card,
        "commits": commits,
        "discussions": {"count": titles.len(), "titles": titles},
    });
    let o = doc.as_object_mut().expect("object");
    if rng.random_bool(0.9) {
        o.insert("usedStorage".into(), json!(rng.random_range(1_000_000u64..20_000_000_000)));
    }
    if rng.random_bool(0.8) {
        o.insert("library_name".into(), json!(LIBRARIES.choose(rng).copied()));
    }
    if let Some(c) = co2 {
        o.insert("cardData".into(), json!({ "co2_eq_emissions": c }));
    }
    doc
}
