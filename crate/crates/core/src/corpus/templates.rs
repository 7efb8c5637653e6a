//! Utterance template library.
//!
//! Templates are whitespace token lists over a closed vocabulary; `<REF>`
//! marks where a referent's player token is spliced in. Each set obeys strict
//! lexical rules so task-instance extraction stays unambiguous: only address
//! templates contain second-person tokens, only pronoun templates contain
//! third-person pronouns (exactly one each), and only mention / vocative
//! templates contain `<REF>`.

pub const REF_SLOT: &str = "<REF>";

/// Second-person utterances with no referent cue in the text.
pub const ADDRESS_PLAIN: &[&str] = &[
    "why are you lying",
    "i do not believe you",
    "you need to explain yourself",
    "are you the Werewolf",
    "what did you do at night",
    "you look very nervous",
    "i saw your card move",
    "you are not telling the truth",
    "do you have any proof",
    "i think you switched the cards",
    "why would you say that",
    "you should vote with us",
    "can you defend your claim",
];

/// Second-person utterances addressed to the whole table; the `everyone`
/// token is the textual cue.
pub const ADDRESS_EVERYONE: &[&str] = &[
    "everyone , you all need to calm down",
    "listen everyone , you should all vote now",
    "everyone , i am telling you the truth",
    "everyone here knows you cannot trust a Werewolf",
    "okay everyone , you all saw that",
    "everyone , can you please focus",
    "everyone , you all heard the claim",
    "everyone , you should compare notes",
    "everyone , i need you all to listen",
    "everyone , you all look guilty to me",
    "everyone , you must decide together",
    "everyone , can you all stay calm",
];

/// Third-person utterances, exactly one pronoun each, no names.
pub const PRONOUN: &[&str] = &[
    "i think he was the Werewolf",
    "he is acting very suspicious",
    "i saw him flip a card",
    "his story does not add up",
    "he has been quiet all game",
    "i do not trust him",
    "she looked at the middle cards",
    "her claim was very strange",
    "i believe him completely",
    "he must be the Robber",
    "she swapped someone at night",
    "maybe he is just confused",
    "i watched her the whole time",
];

/// Name-mention utterances; `<REF>` is the mentioned player.
pub const MENTION: &[&str] = &[
    "<REF> seems very nervous",
    "i do not trust <REF>",
    "<REF> has been lying all game",
    "i think <REF> took my card",
    "<REF> claimed Seer very fast",
    "we should vote for <REF>",
    "<REF> is acting strange today",
    "my vote goes to <REF>",
    "i saw <REF> peek at night",
    "<REF> must be the Werewolf",
    "<REF> kept changing the story",
    "i believe <REF> is innocent",
];

/// Trigger-free chatter: no second person, no pronouns, no names.
pub const FILLER: &[&str] = &[
    "i am just a Villager",
    "this game is very confusing",
    "let us think about the votes",
    "the night phase felt long",
    "i had the Insomniac card",
    "someone switched the cards",
    "we need more information",
    "the Werewolf team is winning",
    "i will explain my role later",
    "that claim sounds plausible",
    "the middle cards matter here",
    "voting time is coming soon",
];

pub fn tokenize(template: &str) -> Vec<String> {
    template.split_whitespace().map(str::to_string).collect()
}

/// Splice the referent token into a template.
pub fn instantiate(template: &str, referent_token: &str) -> Vec<String> {
    template
        .split_whitespace()
        .map(|t| if t == REF_SLOT { referent_token.to_string() } else { t.to_string() })
        .collect()
}

/// Every distinct word type across the library, `<REF>` excluded.
pub fn word_types() -> Vec<String> {
    let mut words: Vec<String> = ADDRESS_PLAIN
        .iter()
        .chain(ADDRESS_EVERYONE.iter())
        .chain(PRONOUN.iter())
        .chain(MENTION.iter())
        .chain(FILLER.iter())
        .flat_map(|t| t.split_whitespace())
        .filter(|w| *w != REF_SLOT)
        .map(str::to_string)
        .collect();
    words.sort();
    words.dedup();
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{parse_player_token, SECOND_PERSON_TOKENS, THIRD_PERSON_PRONOUNS};

    fn has_second_person(t: &str) -> bool {
        t.split_whitespace().any(|w| SECOND_PERSON_TOKENS.contains(&w))
    }

    fn pronoun_count(t: &str) -> usize {
        t.split_whitespace().filter(|w| THIRD_PERSON_PRONOUNS.contains(w)).count()
    }

    fn has_ref(t: &str) -> bool {
        t.split_whitespace().any(|w| w == REF_SLOT)
    }

    #[test]
    fn library_sizes_meet_the_floor() {
        assert!(ADDRESS_PLAIN.len() >= 12);
        assert!(ADDRESS_EVERYONE.len() >= 12);
        assert!(PRONOUN.len() >= 12);
        assert!(MENTION.len() >= 12);
        assert!(FILLER.len() >= 12);
    }

    #[test]
    fn lexical_rules_hold() {
        for t in ADDRESS_PLAIN {
            assert!(has_second_person(t), "{t}");
            assert_eq!(pronoun_count(t), 0, "{t}");
            assert!(!has_ref(t), "{t}");
            assert!(!t.contains("everyone"), "{t}");
        }
        for t in ADDRESS_EVERYONE {
            assert!(has_second_person(t), "{t}");
            assert!(t.contains("everyone"), "{t}");
            assert_eq!(pronoun_count(t), 0, "{t}");
            assert!(!has_ref(t), "{t}");
        }
        for t in PRONOUN {
            assert_eq!(pronoun_count(t), 1, "{t}");
            assert!(!has_second_person(t), "{t}");
            assert!(!has_ref(t), "{t}");
        }
        for t in MENTION {
            assert!(has_ref(t), "{t}");
            assert!(!has_second_person(t), "{t}");
            assert_eq!(pronoun_count(t), 0, "{t}");
        }
        for t in FILLER {
            assert!(!has_second_person(t), "{t}");
            assert_eq!(pronoun_count(t), 0, "{t}");
            assert!(!has_ref(t), "{t}");
            assert!(!t.contains("everyone"), "{t}");
        }
    }

    #[test]
    fn no_template_contains_player_tokens() {
        for w in word_types() {
            assert!(parse_player_token(&w).is_none(), "{w}");
        }
    }

    #[test]
    fn vocabulary_stays_closed_and_small() {
        assert!(word_types().len() <= 200, "vocabulary has {} types", word_types().len());
    }
}
