//! Generator for the bundled synthetic corpus.
//!
//! Theft and robbery cases come in twins that share every detail except how
//! the property was taken, so each theft case's nearest other-label neighbour
//! is its robbery twin. Fraud and injury cases fill out the label space.

use serde_json::json;

/// Phrases the facts are built from, in priority order.
pub const LEXICON: [&str; 8] = [
    "took property",
    "used violence",
    "secretly",
    "deceived the victim",
    "obtained money",
    "injured the victim",
    "small sum",
    "large sum",
];

const NAMES: [&str; 15] = [
    "Zhang Wei", "Li Na", "Wang Fang", "Liu Yang", "Chen Jie", "Yang Min", "Zhao Lei", "Huang Ying", "Zhou Tao",
    "Wu Hao", "Xu Jing", "Sun Qiang", "Ma Lin", "Zhu Hong", "Hu Bin",
];
const PLACES: [&str; 15] = [
    "a grocery store", "a bus station", "a parking lot", "a night market", "a hotel lobby", "a riverside park",
    "a railway platform", "a shopping mall", "an internet cafe", "a hospital ward", "a garment factory",
    "a university dormitory", "a courier depot", "a mahjong parlour", "a construction site",
];
const CITIES: [&str; 15] = [
    "Hangzhou", "Chengdu", "Wuhan", "Nanjing", "Xiamen", "Kunming", "Harbin", "Lanzhou", "Qingdao", "Changsha",
    "Guiyang", "Hefei", "Nanning", "Taiyuan", "Shenyang",
];
const OBJECTS: [&str; 15] = [
    "a mobile phone", "a leather wallet", "a gold necklace", "an electric scooter", "a laptop computer",
    "a bundle of cash", "a silver bracelet", "a digital camera", "a carton of cigarettes", "a bicycle",
    "a tablet", "a wristwatch", "a jade pendant", "a handbag", "a set of tools",
];
const VICTIMS: [&str; 15] = [
    "Mr. Gao", "Ms. Lin", "Mr. Qian", "Ms. Tang", "Mr. Feng", "Ms. Deng", "Mr. Cao", "Ms. Peng", "Mr. Zeng",
    "Ms. Xiao", "Mr. Tian", "Ms. Dong", "Mr. Pan", "Ms. Yuan", "Mr. Cai",
];
const MONTHS: [&str; 12] =
    ["January", "February", "March", "April", "May", "June", "July", "August", "September", "October", "November", "December"];

fn record(id: String, fact: String, article: u32, charge: &str, months: u32) -> String {
    json!({
        "case_id": id,
        "fact": fact,
        "meta": {
            "relevant_articles": [article],
            "accusation": [charge],
            "term_of_imprisonment": { "imprisonment": months },
        },
    })
    .to_string()
}

/// The corpus as JSON lines, `4 * pairs` cases: `pairs` theft/robbery twins,
/// `pairs` fraud and `pairs` injury cases. Content depends only on `pairs`.
pub fn generate(pairs: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(pairs * 4);
    for i in 0..pairs {
        let pick = |list: &[&'static str], salt: usize| list[(i * 7 + salt) % list.len()];
        let (name, place, city, object, victim) =
            (pick(&NAMES, 0), pick(&PLACES, 3), pick(&CITIES, 5), pick(&OBJECTS, 1), pick(&VICTIMS, 2));
        let date = format!("{} {}", MONTHS[i % 12], 1 + (i * 5) % 28);
        let large = i % 2 == 1;
        let (size, months) = if large { ("large", 24 + (i % 4) * 6) } else { ("small", 6 + i % 6) };
        out.push(record(
            format!("syn-{:03}", 4 * i),
            format!(
                "On {date}, defendant {name} went to {place} in {city} and secretly took property, namely {object} worth a {size} sum, belonging to {victim}, and left without being noticed."
            ),
            264,
            "theft",
            months as u32,
        ));
        out.push(record(
            format!("syn-{:03}", 4 * i + 1),
            format!(
                "On {date}, defendant {name} went to {place} in {city} and used violence against {victim}, then took property, namely {object} worth a {size} sum, and left the scene."
            ),
            263,
            "robbery",
            months as u32 + 30,
        ));
        let (f_name, f_place, f_city, f_victim) = (pick(&NAMES, 9), pick(&PLACES, 11), pick(&CITIES, 13), pick(&VICTIMS, 8));
        out.push(record(
            format!("syn-{:03}", 4 * i + 2),
            format!(
                "In {}, defendant {f_name} met {f_victim} at {f_place} in {f_city}, deceived the victim with a fabricated investment plan and obtained money amounting to a {size} sum.",
                MONTHS[(i + 4) % 12]
            ),
            266,
            "fraud",
            months as u32,
        ));
        let (j_name, j_place, j_city, j_victim) = (pick(&NAMES, 4), pick(&PLACES, 6), pick(&CITIES, 10), pick(&VICTIMS, 12));
        let severe = i % 3 == 0;
        out.push(record(
            format!("syn-{:03}", 4 * i + 3),
            format!(
                "In {}, defendant {j_name} quarrelled with {j_victim} at {j_place} in {j_city}, used violence with a wooden stick and injured the victim, causing {} injuries.",
                MONTHS[(i + 8) % 12],
                if severe { "serious" } else { "minor" }
            ),
            234,
            "intentional_injury",
            if severe { 36 } else { 8 },
        ));
    }
    out
}
