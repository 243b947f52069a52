//! Parsers for judge ratings and generated instruction/output pairs.

use serde_json::Value;

use super::GatewayError;
use crate::model::RatingVector;

const RATING_KEYS: [&str; 4] = ["Rarity", "Complexity", "Informativeness", "Overall rating"];

/// Finds the first well-formed JSON object embedded anywhere in `raw`.
fn first_json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    raw.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

/// Extracts the judge's four integer scores from a free-form response.
pub fn parse_rating(raw: &str) -> Result<RatingVector, GatewayError> {
    let obj = first_json_object(raw).ok_or(GatewayError::NoJsonFound)?;
    let mut scores = [0i64; 4];
    for (slot, key) in scores.iter_mut().zip(RATING_KEYS) {
        let v = obj
            .get(key)
            .ok_or_else(|| GatewayError::MissingKey(key.to_string()))?;
        *slot = v.as_i64().ok_or_else(|| GatewayError::InvalidScore {
            key: key.to_string(),
            value: v.to_string(),
        })?;
        if !(1..=10).contains(slot) {
            return Err(GatewayError::ScoreOutOfRange {
                key: key.to_string(),
                value: *slot,
            });
        }
    }
    Ok(RatingVector::new(scores[0], scores[1], scores[2], scores[3]).expect("range checked above"))
}

const INSTRUCTION: &str = "Instruction:";
const OUTPUT: &str = "Output:";

/// Splits a plain-text generation into `(instruction, output)` pairs.
/// Chunks without an `Output:` marker or with an empty output are dropped.
pub fn parse_generated_pairs(raw: &str) -> Result<Vec<(String, String)>, GatewayError> {
    let starts: Vec<usize> = raw.match_indices(INSTRUCTION).map(|(i, _)| i).collect();
    let mut pairs = Vec::new();
    for (n, &start) in starts.iter().enumerate() {
        let end = starts.get(n + 1).copied().unwrap_or(raw.len());
        let chunk = &raw[start + INSTRUCTION.len()..end];
        let Some(o) = chunk.find(OUTPUT) else {
            continue;
        };
        let instruction = chunk[..o].trim();
        let output = chunk[o + OUTPUT.len()..].trim();
        if !instruction.is_empty() && !output.is_empty() {
            pairs.push((instruction.to_string(), output.to_string()));
        }
    }
    if pairs.is_empty() {
        return Err(GatewayError::ZeroPairsFound);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rating_schema_example() {
        let r = parse_rating(
            r#"{"Rarity": 6, "Complexity": 7, "Informativeness": 8, "Overall rating": 7}"#,
        )
        .unwrap();
        assert_eq!(
            (r.rarity, r.complexity, r.informativeness, r.overall),
            (6, 7, 8, 7)
        );
    }

    #[test]
    fn rating_embedded_in_prose() {
        let r = parse_rating(
            r#"prefix text {"Rarity":1,"Complexity":1,"Informativeness":1,"Overall rating":1} suffix"#,
        )
        .unwrap();
        assert_eq!(r, RatingVector::new(1, 1, 1, 1).unwrap());
        let r = parse_rating(
            "Sure {not json} here:\n{\"Rarity\": 2,\n \"Complexity\": 3,\n \"Informativeness\": 4,\n \"Overall rating\": 5}",
        )
        .unwrap();
        assert_eq!(r.overall, 5);
    }

    #[test]
    fn rating_errors() {
        assert_eq!(
            parse_rating(
                r#"{"Rarity": 11, "Complexity": 7, "Informativeness": 8, "Overall rating": 7}"#
            ),
            Err(GatewayError::ScoreOutOfRange {
                key: "Rarity".into(),
                value: 11
            })
        );
        assert_eq!(
            parse_rating("no braces here"),
            Err(GatewayError::NoJsonFound)
        );
        assert_eq!(
            parse_rating(r#"{"Rarity": 6, "Complexity": 7, "Informativeness": 8}"#),
            Err(GatewayError::MissingKey("Overall rating".into()))
        );
        assert!(matches!(
            parse_rating(
                r#"{"Rarity": 6.5, "Complexity": 7, "Informativeness": 8, "Overall rating": 7}"#
            ),
            Err(GatewayError::InvalidScore { .. })
        ));
    }

    #[test]
    fn judge_json_round_trips() {
        for o in 1..=10 {
            let r = RatingVector::new(o, 11 - o, (o % 10) + 1, o).unwrap();
            assert_eq!(parse_rating(&r.to_judge_json()).unwrap(), r);
        }
    }

    #[test]
    fn pairs_examples() {
        assert_eq!(
            parse_generated_pairs("Instruction: A\nOutput: B\n\nInstruction: C\nOutput: D")
                .unwrap(),
            vec![
                ("A".to_string(), "B".to_string()),
                ("C".to_string(), "D".to_string())
            ]
        );
        assert_eq!(
            parse_generated_pairs("Instruction: A"),
            Err(GatewayError::ZeroPairsFound)
        );
        let three = "Instruction: q1\nOutput: a1\n\nInstruction: q2\nOutput: a2 spans\ntwo lines\n\nInstruction: q3\nOutput: a3\n\nInstruction: dangling";
        let pairs = parse_generated_pairs(three).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[1].1, "a2 spans\ntwo lines");
        assert_eq!(pairs[2].0, "q3");
    }
}
