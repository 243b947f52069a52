//! Deterministic offline backend.
//!
//! Responses come from a fixture table keyed by the SHA-256 of the prompt.
//! Prompts without a fixture get a synthesized reply derived from the prompt
//! text alone, shaped like what the real generator or judge would return, so
//! whole pipelines can run without network access.

use std::collections::HashMap;
use std::path::Path;

use super::client::{ChatRequest, ChatTransport, TransportError};
use super::parse::parse_generated_pairs;
use super::GatewayError;
use crate::ingest::split_sentences;
use crate::model::RatingVector;
use crate::reward::LINEARIZE_HEADER;

#[derive(Debug, Clone, Default)]
pub struct MockTransport {
    fixtures: HashMap<String, String>,
}

impl MockTransport {
    pub fn new(fixtures: HashMap<String, String>) -> Self {
        MockTransport { fixtures }
    }

    /// Loads a JSON object of `{ "<sha256 of prompt>": "<response>" }`.
    pub fn from_fixture_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        let fixtures = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Ok(MockTransport { fixtures })
    }

    pub fn respond(&self, prompt: &str) -> String {
        let key = crate::sha256_hex(prompt.as_bytes());
        if let Some(r) = self.fixtures.get(&key) {
            return r.clone();
        }
        synthesize(prompt, seed_of(&key))
    }
}

impl ChatTransport for MockTransport {
    fn send(&self, req: &ChatRequest) -> Result<String, TransportError> {
        Ok(self.respond(req.prompt()))
    }
}

fn seed_of(hex_digest: &str) -> u64 {
    u64::from_str_radix(&hex_digest[..16], 16).expect("hex digest")
}

/// Small deterministic stream of pseudo-random numbers (splitmix64).
struct Mix(u64);

impl Mix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

fn synthesize(prompt: &str, seed: u64) -> String {
    let mut rng = Mix(seed);
    if prompt.starts_with("As a data quality estimator") {
        rate(prompt, &mut rng)
    } else if prompt.starts_with("You are a knowledgeable assistant") {
        generate_high(prompt, &mut rng)
    } else if prompt.starts_with("You are a moderately skilled assistant") {
        generate_low(prompt, &mut rng)
    } else if prompt.starts_with("You are a data fusion expert") {
        fuse(prompt)
    } else if prompt.starts_with(LINEARIZE_HEADER) {
        distill(prompt)
    } else {
        "OK".to_string()
    }
}

fn section_after<'a>(prompt: &'a str, marker: &str) -> &'a str {
    prompt
        .rfind(marker)
        .map(|i| prompt[i + marker.len()..].trim())
        .unwrap_or("")
}

fn word_after<'a>(prompt: &'a str, marker: &str) -> &'a str {
    section_after_first(prompt, marker)
        .split_whitespace()
        .next()
        .unwrap_or("")
}

fn section_after_first<'a>(prompt: &'a str, marker: &str) -> &'a str {
    prompt
        .find(marker)
        .map(|i| &prompt[i + marker.len()..])
        .unwrap_or("")
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn subject_of(text: &str) -> String {
    let w: Vec<&str> = words(text)
        .into_iter()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .take(4)
        .collect();
    if w.is_empty() {
        "the topic".to_string()
    } else {
        w.join(" ")
    }
}

/// Judge heuristic: longer, denser responses rate higher, with jitter.
fn rate(prompt: &str, rng: &mut Mix) -> String {
    let response = section_after(prompt, "\nResponse:");
    let w = words(response);
    let distinct = {
        let mut v: Vec<String> = w.iter().map(|s| s.to_lowercase()).collect();
        v.sort();
        v.dedup();
        v.len()
    };
    let base = 1.0 + distinct as f64 / 8.0;
    let jitter = [-1i64, 0, 0, 0, 1][rng.below(5) as usize];
    let overall = (base.round() as i64 + jitter).clamp(1, 10);
    let mut near = |v: i64| (v + rng.below(3) as i64 - 1).clamp(1, 10);
    let r = RatingVector::new(near(overall), near(overall), near(overall), overall)
        .expect("clamped into range");
    format!("Here is my assessment.\n{}", r.to_judge_json())
}

fn instruction_for(task: &str, subject: &str, i: usize) -> String {
    match task {
        "mcq" => format!(
            "Which statement about {subject} is best supported by the evidence? A) it had no lasting effect B) it shaped later developments C) it was purely ceremonial D) it is undocumented (variant {})",
            i + 1
        ),
        "tfq" => format!("True or false: {subject} influenced what followed. Justify the answer (part {}).", i + 1),
        "cs" => format!("Complete the statement with supporting detail: {subject} ... (item {})", i + 1),
        "para" => format!("Write an informative paragraph explaining {subject} (angle {}).", i + 1),
        _ => format!("How does {subject} connect to the events described, and why does it matter? (aspect {})", i + 1),
    }
}

fn generate_high(prompt: &str, rng: &mut Mix) -> String {
    let task = word_after(prompt, "exceptionally high-quality ");
    let passage = section_after(prompt, "\nPassage\n");
    let sentences = split_sentences(passage);
    if sentences.is_empty() {
        return "I could not find a passage.".to_string();
    }
    let count = 3 + rng.below(2) as usize;
    let mut out = Vec::new();
    for i in 0..count {
        let take: Vec<&str> = (0..sentences.len().min(4))
            .map(|k| sentences[(i + k) % sentences.len()].as_str())
            .collect();
        let subject = subject_of(take[0]);
        let output = format!(
            "{} Taken together, these details explain why {subject} mattered and how its consequences unfolded over time.",
            take.join(" ")
        );
        out.push(format!(
            "Instruction: {}\nOutput: {output}",
            instruction_for(task, &subject, i)
        ));
    }
    out.join("\n\n")
}

fn generate_low(prompt: &str, rng: &mut Mix) -> String {
    let n: usize = word_after(prompt, "tasked with producing ")
        .parse()
        .unwrap_or(3);
    let task = section_after_first(prompt, "low-quality ")
        .split_whitespace()
        .next()
        .unwrap_or("qa");
    let orig = section_after(prompt, "\nOriginal Data\n");
    let body = orig.find("Output:").map(|i| &orig[i + 7..]).unwrap_or(orig);
    let w = words(body);
    let subject = subject_of(body);
    (0..n.max(1))
        .map(|j| {
            let start = (j * 5 + rng.below(3) as usize).min(w.len().saturating_sub(1));
            let len = 6 + rng.below(8) as usize;
            let slice: Vec<&str> = w.iter().skip(start).take(len).copied().collect();
            format!(
                "Instruction: {} something about {subject}?\nOutput: {}.",
                if task == "mcq" { "Pick" } else { "Tell me" },
                slice.join(" ").trim_end_matches('.')
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn fuse(prompt: &str) -> String {
    let one = section_after_first(prompt, "Instance-1:\n");
    let (one, two) = match one.find("\nInstance-2:\n") {
        Some(i) => (&one[..i], &one[i + 13..]),
        None => (one, ""),
    };
    let a = parse_generated_pairs(one)
        .ok()
        .and_then(|p| p.into_iter().next());
    let b = parse_generated_pairs(two)
        .ok()
        .and_then(|p| p.into_iter().next());
    match (a, b) {
        (Some(a), Some(b)) => format!(
            "Instruction: {} In addition, {}\nOutput: {} Moreover, {}",
            a.0, b.0, a.1, b.1
        ),
        (Some(a), None) | (None, Some(a)) => format!("Instruction: {}\nOutput: {}", a.0, a.1),
        (None, None) => {
            "Instruction: Summarize the two instances.\nOutput: Nothing to merge.".into()
        }
    }
}

fn distill(prompt: &str) -> String {
    let body = section_after_first(prompt, "Sample 1:");
    let pairs = parse_generated_pairs(body).unwrap_or_default();
    if pairs.is_empty() {
        return "<think>No samples.</think>\n<answer>Instruction: -\nOutput: -</answer>".into();
    }
    let mut seen = Vec::<String>::new();
    for (_, o) in &pairs {
        let first = split_sentences(o).into_iter().next().unwrap_or_default();
        if !first.is_empty() && !seen.contains(&first) {
            seen.push(first);
        }
    }
    let subject = subject_of(&pairs[0].1);
    format!(
        "<think>The {} samples all concern {subject}; merge their facts and drop repetition.</think>\n<answer>Instruction: Give a complete, well-reasoned account of {subject}.\nOutput: {} In short, the combined evidence gives a fuller picture of {subject}.</answer>",
        pairs.len(),
        seen.join(" ")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::parse::parse_rating;
    use crate::gateway::prompt::{render_prompt, vars, TemplateName};

    #[test]
    fn fixture_lookup_by_prompt_hash() {
        let prompt = "fixture prompt";
        let mut m = HashMap::new();
        m.insert(
            crate::sha256_hex(prompt.as_bytes()),
            "fixture response".to_string(),
        );
        let t = MockTransport::new(m);
        assert_eq!(t.respond(prompt), "fixture response");
    }

    #[test]
    fn synthesized_replies_are_deterministic_and_parse() {
        let t = MockTransport::default();
        let gen = render_prompt(
            TemplateName::GenHigh,
            &vars([
                ("task_type", "qa"),
                ("passage", "The bridge opened in 1890. It carried rail traffic across the firth. Engineers used a cantilever design. The design survived storms."),
            ]),
        )
        .unwrap();
        let a = t.respond(&gen);
        assert_eq!(a, t.respond(&gen));
        let pairs = parse_generated_pairs(&a).unwrap();
        assert!((3..=4).contains(&pairs.len()));

        let rating_prompt = render_prompt(
            TemplateName::Rating,
            &vars([
                ("instruction", pairs[0].0.as_str()),
                ("input", ""),
                ("response", pairs[0].1.as_str()),
            ]),
        )
        .unwrap();
        let r = parse_rating(&t.respond(&rating_prompt)).unwrap();
        assert!((1..=10).contains(&r.overall));
    }

    #[test]
    fn low_quality_generation_honors_n() {
        let t = MockTransport::default();
        let p = render_prompt(
            TemplateName::GenLow,
            &vars([
                ("n", "5"),
                ("task_type", "tfq"),
                (
                    "orig",
                    "Instruction: q\nOutput: a b c d e f g h i j k l m n o p q r s t u v w x y z.",
                ),
            ]),
        )
        .unwrap();
        assert_eq!(parse_generated_pairs(&t.respond(&p)).unwrap().len(), 5);
    }
}
