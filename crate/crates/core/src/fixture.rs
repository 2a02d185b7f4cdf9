//! Deterministic, gold-annotated fixture letters.
//!
//! Letters are assembled from templates in three shapes (discharge summary,
//! admission note, correspondence). Every PHI slot becomes a gold PHI span
//! and every medical slot a gold MED span. Each header carries a patient
//! name and at least one multi-token date.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{AnnotatedDocument, CharSpan, Corpus, CorpusError};
use crate::rng::derive_rng;

pub const FIRST_NAMES: &[&str] = &[
    "James",
    "Robert",
    "Michael",
    "William",
    "David",
    "Richard",
    "Joseph",
    "Thomas",
    "Charles",
    "Daniel",
    "Matthew",
    "Anthony",
    "Donald",
    "Steven",
    "Paul",
    "Andrew",
    "Joshua",
    "Kenneth",
    "Kevin",
    "Brian",
    "Mary",
    "Patricia",
    "Jennifer",
    "Linda",
    "Elizabeth",
    "Barbara",
    "Susan",
    "Jessica",
    "Sarah",
    "Karen",
    "Nancy",
    "Lisa",
    "Margaret",
    "Sandra",
    "Ashley",
    "Emily",
    "Donna",
    "Michelle",
    "Carol",
    "Amanda",
    "Melissa",
    "Deborah",
    "Stephanie",
    "Rebecca",
    "Laura",
    "Sharon",
    "Cynthia",
    "Kathleen",
    "Helen",
    "Amy",
];

pub const LAST_NAMES: &[&str] = &[
    "Smith",
    "Johnson",
    "Williams",
    "Jones",
    "Garcia",
    "Miller",
    "Davis",
    "Rodriguez",
    "Martinez",
    "Hernandez",
    "Lopez",
    "Gonzalez",
    "Wilson",
    "Anderson",
    "Taylor",
    "Moore",
    "Jackson",
    "Martin",
    "Lee",
    "Thompson",
    "Harris",
    "Clark",
    "Lewis",
    "Robinson",
    "Walker",
    "Allen",
    "Nguyen",
    "Hill",
    "Flores",
    "Adams",
    "Nelson",
    "Baker",
    "Mitchell",
    "Campbell",
    "Roberts",
    "Carter",
    "Phillips",
    "Evans",
    "Turner",
    "Parker",
    "Collins",
    "Edwards",
    "Stewart",
    "Morris",
    "Murphy",
    "Cook",
    "Rogers",
    "Morgan",
    "Peterson",
    "Cooper",
];

pub const CITIES: &[&str] = &[
    "Boston",
    "Worcester",
    "Springfield",
    "Lowell",
    "Cambridge",
    "Brockton",
    "Quincy",
    "Newton",
    "Somerville",
    "Framingham",
    "Haverhill",
    "Waltham",
    "Malden",
    "Medford",
    "Taunton",
    "Chicopee",
    "Weymouth",
    "Revere",
    "Peabody",
    "Methuen",
    "Barnstable",
    "Pittsfield",
    "Attleboro",
    "Arlington",
    "Everett",
    "Salem",
    "Westfield",
    "Leominster",
    "Fitchburg",
];

pub const HOSPITALS: &[&str] = &[
    "Riverside General Hospital",
    "Saint Anne Medical Center",
    "Lakeview Community Hospital",
    "Northgate Memorial Hospital",
    "Harbor View Clinic",
    "Eastfield Regional Medical Center",
    "Bayside Rehabilitation Center",
    "Pine Ridge Hospital",
];

const STREET_NAMES: &[&str] = &[
    "Maple",
    "Oak",
    "Elm",
    "Cedar",
    "Pine",
    "Washington",
    "Lincoln",
    "Highland",
    "Chestnut",
    "Summer",
    "Pleasant",
    "Prospect",
    "Walnut",
    "Spring",
    "Hillside",
];
const STREET_SUFFIXES: &[&str] = &["Street", "Avenue", "Road", "Drive", "Lane"];
const EMAIL_DOMAINS: &[&str] = &["mailbox.org", "example.net", "healthmail.com"];
const PROFESSIONS: &[&str] = &[
    "nurse",
    "teacher",
    "electrician",
    "accountant",
    "carpenter",
    "engineer",
    "farmer",
    "librarian",
    "mechanic",
    "plumber",
];
const MONTHS: &[&str] = &[
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];

pub const PROBLEMS: &[&str] = &[
    "diabetes mellitus",
    "type 2 diabetes",
    "hypertension",
    "hyperlipidemia",
    "coronary artery disease",
    "congestive heart failure",
    "atrial fibrillation",
    "chronic kidney disease",
    "pneumonia",
    "urinary tract infection",
    "cellulitis",
    "chest pain",
    "shortness of breath",
    "diabetic neuropathy",
    "diabetic retinopathy",
    "hypoglycemia",
    "hyperglycemia",
    "obesity",
    "asthma",
    "anemia",
    "osteoarthritis",
    "peripheral vascular disease",
    "foot ulcer",
    "depression",
    "hypothyroidism",
    "sleep apnea",
    "stroke",
    "myocardial infarction",
    "gastroesophageal reflux disease",
    "gout",
];

pub const TESTS: &[&str] = &[
    "hemoglobin A1c",
    "fasting glucose",
    "lipid panel",
    "complete blood count",
    "basic metabolic panel",
    "serum creatinine",
    "urinalysis",
    "chest x-ray",
    "electrocardiogram",
    "echocardiogram",
    "cardiac catheterization",
    "stress test",
    "renal ultrasound",
    "CT scan",
    "MRI",
    "blood cultures",
    "troponin",
    "TSH",
    "liver function tests",
    "urine microalbumin",
];

pub const TREATMENTS: &[&str] = &[
    "metformin",
    "insulin glargine",
    "insulin lispro",
    "glipizide",
    "lisinopril",
    "atorvastatin",
    "simvastatin",
    "aspirin",
    "clopidogrel",
    "metoprolol",
    "furosemide",
    "amlodipine",
    "hydrochlorothiazide",
    "warfarin",
    "levothyroxine",
    "omeprazole",
    "vancomycin",
    "ceftriaxone",
    "physical therapy",
    "dietary counseling",
    "angioplasty",
    "wound debridement",
    "nitroglycerin",
    "heparin",
    "allopurinol",
];

const DOSES: &[&str] = &[
    "5 mg", "10 mg", "20 mg", "40 mg", "81 mg", "500 mg", "1000 mg", "12 units", "20 units",
];
const FREQUENCIES: &[&str] = &[
    "once daily",
    "twice daily",
    "at bedtime",
    "every morning",
    "three times daily",
];
const DURATIONS: &[&str] = &["two", "three", "four", "six"];

const DISCHARGE_HEADER: &str = "DISCHARGE SUMMARY\n\nPatient: {PATIENT}\nMRN: {MRN}\nAdmission Date: {DATE}\nDischarge Date: {DATE}\nAttending: Dr. {DOCFULL}\n\n";
const ADMISSION_HEADER: &str = "ADMISSION NOTE\n\nDate of admission: {DATE}\nPatient name: {PATIENT}\nMedical record number: {MRN}\nAdmitting physician: Dr. {DOCFULL}, {HOSPITAL}\n\n";
const LETTER_HEADER: &str = "{HOSPITAL}\n{STREET}\n{CITY}, {STATE}\nTel: {PHONE}\nFax: {FAX}\n\n{DATE}\n\nDear Dr. {DOCTOR},\n\nRe: {PATIENT}, MRN {MRN}\n\n";

const HISTORY: &[&str] = &[
    "{Title} {PLAST} is a {AGE}-year-old {SEX} with a history of {PROBLEM} and {PROBLEM}.",
    "{He} presented to {HOSPITAL} on {DATE} with worsening {PROBLEM}.",
    "{He} was first diagnosed with {PROBLEM} in {YEAR} and has been treated with {TREATMENT} since then.",
    "{He} reports good adherence to {TREATMENT} but notes occasional episodes of {PROBLEM}.",
    "{He} describes increasing fatigue over the past {DURATION} weeks.",
    "{He} denies fever, chills, or recent travel.",
    "The patient lives alone in {CITY} and works as a {PROFESSION}.",
    "{His} family history is notable for {PROBLEM} in {his} mother.",
    "{He} was seen in the clinic on {DATE} where {his} {TEST} was elevated.",
    "{He} has a long history of poorly controlled {PROBLEM}.",
    "On arrival {his} blood pressure was {BP} and heart rate was {HR}.",
    "{He} was referred by Dr. {DOCTOR} for further evaluation of {PROBLEM}.",
    "{He} noticed a painful {PROBLEM} on the left foot about {DURATION} weeks ago.",
];

const COURSE: &[&str] = &[
    "A {TEST} showed a value of {NUM}, and {TREATMENT} was started.",
    "{His} {TEST} was normal and {TEST} showed no acute changes.",
    "{He} was treated with {TREATMENT} with rapid improvement of {his} symptoms.",
    "The {PROBLEM} was managed with {TREATMENT} {DOSE} {FREQ}.",
    "Repeat {TEST} on {DATE} was stable.",
    "{He} remained stable throughout the admission and tolerated a regular diet.",
    "Blood sugars were difficult to control, and {TREATMENT} was adjusted daily.",
    "{He} developed mild {PROBLEM}, which resolved after {TREATMENT}.",
    "Cardiology was consulted and recommended {TEST}.",
    "The wound was cleaned and the dressing was changed every day.",
    "{His} renal function improved with careful fluid management.",
    "{He} was seen by the diabetes educator, who reviewed insulin technique and diet.",
    "{He} was evaluated by physical therapy and was able to walk without assistance.",
    "Results of the {TEST} were discussed with the patient and {his} family.",
];

const MEDICATIONS: &[&str] = &[
    "{TREATMENT} {DOSE} {FREQ}.",
    "Continue {TREATMENT} {DOSE} {FREQ}.",
    "Start {TREATMENT} {DOSE} {FREQ}.",
    "{He} will continue {TREATMENT} and {TREATMENT} at the current doses.",
    "Stop {TREATMENT} until further notice.",
];

const PLAN: &[&str] = &[
    "{He} will follow up with Dr. {DOCTOR} in {DURATION} weeks.",
    "Please repeat the {TEST} before the next visit.",
    "{He} was instructed to check {his} blood sugar twice daily and to call {PHONE} with any concerns.",
    "We will see {him} again on {DATE}.",
    "{He} should return to the emergency department for any new {PROBLEM}.",
    "Questions may be sent to {EMAIL}.",
    "Home nursing will visit {him} at {STREET} in {CITY}.",
    "{He} was discharged home in good condition.",
    "A follow-up {TEST} has been scheduled at {HOSPITAL}.",
];

const LETTER_OPENINGS: &[&str] = &[
    "Thank you for referring {Title} {PLAST}, a {AGE}-year-old {SEX}, for evaluation of {PROBLEM}.",
    "I had the pleasure of seeing {Title} {PLAST} in the clinic on {DATE}.",
    "I am writing to update you on {Title} {PLAST}, whom I saw on {DATE} for {PROBLEM}.",
];

const LETTER_CLOSINGS: &[&str] = &[
    "Thank you for allowing me to participate in the care of this patient.",
    "Please do not hesitate to contact me with any questions.",
    "I will keep you informed of {his} progress.",
];

#[derive(Debug, Clone, Copy)]
enum LetterKind {
    Discharge,
    Admission,
    Correspondence,
}

/// Per-letter identity so repeated name slots agree.
struct Persona {
    first: &'static str,
    last: &'static str,
    female: bool,
    doctor_first: &'static str,
    doctor_last: &'static str,
    referrer_last: &'static str,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    persona: Persona,
    text: String,
    len: usize,
    phi: Vec<CharSpan>,
    med: Vec<CharSpan>,
}

impl Builder<'_> {
    fn push(&mut self, s: &str) {
        self.text.push_str(s);
        self.len += s.chars().count();
    }

    fn annotated(&mut self, value: &str, category: &str, subtype: Option<&str>, med: bool) {
        let start = self.len;
        self.push(value);
        let span = CharSpan {
            category: category.to_string(),
            subtype: subtype.map(str::to_string),
            start,
            end: self.len,
        };
        if med {
            self.med.push(span);
        } else {
            self.phi.push(span);
        }
    }

    fn pick(&mut self, list: &[&'static str]) -> &'static str {
        list.choose(self.rng).expect("non-empty list")
    }

    fn date(&mut self) -> String {
        let year = self.rng.random_range(2060..2100);
        let month = self.rng.random_range(1..=12usize);
        let day = self.rng.random_range(1..=28);
        match self.rng.random_range(0..3) {
            0 => format!("{month:02}/{day:02}/{year}"),
            1 => format!("{year}-{month:02}-{day:02}"),
            _ => format!("{} {day}, {year}", MONTHS[month - 1]),
        }
    }

    fn phone(&mut self) -> String {
        let area = self.pick(&["617", "508", "781", "413", "978"]);
        let line = self.rng.random_range(100..10000);
        format!("({area}) 555-{line:04}")
    }

    fn slot(&mut self, name: &str) {
        let female = self.persona.female;
        match name {
            "PATIENT" => {
                let v = format!("{} {}", self.persona.first, self.persona.last);
                self.annotated(&v, "NAME", Some("PATIENT"), false);
            }
            "PLAST" => {
                let v = self.persona.last;
                self.annotated(v, "NAME", Some("PATIENT"), false);
            }
            "DOCFULL" => {
                let v = format!("{} {}", self.persona.doctor_first, self.persona.doctor_last);
                self.annotated(&v, "NAME", Some("DOCTOR"), false);
            }
            "DOCTOR" => {
                let v = self.persona.referrer_last;
                self.annotated(v, "NAME", Some("DOCTOR"), false);
            }
            "DATE" => {
                let v = self.date();
                self.annotated(&v, "DATE", None, false);
            }
            "YEAR" => {
                let v = self.rng.random_range(2040..2060).to_string();
                self.annotated(&v, "DATE", None, false);
            }
            "AGE" => {
                let v = self.rng.random_range(23..98).to_string();
                self.annotated(&v, "AGE", None, false);
            }
            "MRN" => {
                let v = self.rng.random_range(1_000_000..10_000_000).to_string();
                self.annotated(&v, "ID", Some("MEDICALRECORD"), false);
            }
            "PHONE" => {
                let v = self.phone();
                self.annotated(&v, "CONTACT", Some("PHONE"), false);
            }
            "FAX" => {
                let v = self.phone();
                self.annotated(&v, "CONTACT", Some("FAX"), false);
            }
            "EMAIL" => {
                let domain = self.pick(EMAIL_DOMAINS);
                let v = format!("{}.{}@{domain}", self.persona.first, self.persona.last).to_lowercase();
                self.annotated(&v, "CONTACT", Some("EMAIL"), false);
            }
            "CITY" => {
                let v = self.pick(CITIES);
                self.annotated(v, "LOCATION", Some("CITY"), false);
            }
            "HOSPITAL" => {
                let v = self.pick(HOSPITALS);
                self.annotated(v, "LOCATION", Some("HOSPITAL"), false);
            }
            "STREET" => {
                let number = self.rng.random_range(1..400);
                let street = self.pick(STREET_NAMES);
                let suffix = self.pick(STREET_SUFFIXES);
                let v = format!("{number} {street} {suffix}");
                self.annotated(&v, "LOCATION", Some("STREET"), false);
            }
            "STATE" => self.annotated("MA", "LOCATION", Some("STATE"), false),
            "PROFESSION" => {
                let v = self.pick(PROFESSIONS);
                self.annotated(v, "PROFESSION", None, false);
            }
            "PROBLEM" => {
                let v = self.pick(PROBLEMS);
                self.annotated(v, "PROBLEM", None, true);
            }
            "TEST" => {
                let v = self.pick(TESTS);
                self.annotated(v, "TEST", None, true);
            }
            "TREATMENT" => {
                let v = self.pick(TREATMENTS);
                self.annotated(v, "TREATMENT", None, true);
            }
            "DOSE" => {
                let v = self.pick(DOSES);
                self.push(v);
            }
            "FREQ" => {
                let v = self.pick(FREQUENCIES);
                self.push(v);
            }
            "DURATION" => {
                let v = self.pick(DURATIONS);
                self.push(v);
            }
            "NUM" => {
                let v = format!("{}.{}", self.rng.random_range(4..13), self.rng.random_range(0..10));
                self.push(&v);
            }
            "BP" => {
                let v = format!("{}/{}", self.rng.random_range(110..170), self.rng.random_range(60..100));
                self.push(&v);
            }
            "HR" => {
                let v = self.rng.random_range(55..115).to_string();
                self.push(&v);
            }
            "SEX" => self.push(if female { "woman" } else { "man" }),
            "Title" => self.push(if female { "Ms." } else { "Mr." }),
            "He" => self.push(if female { "She" } else { "He" }),
            "His" => self.push(if female { "Her" } else { "His" }),
            "his" => self.push(if female { "her" } else { "his" }),
            "him" => self.push(if female { "her" } else { "him" }),
            other => panic!("unknown template slot {other}"),
        }
    }

    fn template(&mut self, template: &str) {
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            self.push(&rest[..open]);
            let close = open + rest[open..].find('}').expect("unterminated slot");
            self.slot(&rest[open + 1..close]);
            rest = &rest[close + 1..];
        }
        self.push(rest);
    }

    fn paragraph(&mut self, heading: Option<&str>, pool: &[&str], min: usize, max: usize) {
        if let Some(h) = heading {
            self.push(h);
            self.push("\n");
        }
        let count = self.rng.random_range(min..=max).min(pool.len());
        let chosen: Vec<&str> = pool.choose_multiple(self.rng, count).copied().collect();
        for (i, sentence) in chosen.iter().enumerate() {
            if i > 0 {
                self.push(" ");
            }
            self.template(sentence);
        }
        self.push("\n\n");
    }
}

fn build_letter(rng: &mut ChaCha8Rng, kind: LetterKind) -> (String, Vec<CharSpan>, Vec<CharSpan>) {
    let persona = Persona {
        first: FIRST_NAMES.choose(rng).copied().unwrap_or("James"),
        last: LAST_NAMES.choose(rng).copied().unwrap_or("Smith"),
        female: rng.random_bool(0.5),
        doctor_first: FIRST_NAMES.choose(rng).copied().unwrap_or("Mary"),
        doctor_last: LAST_NAMES.choose(rng).copied().unwrap_or("Jones"),
        referrer_last: LAST_NAMES.choose(rng).copied().unwrap_or("Clark"),
    };
    let mut b = Builder {
        rng,
        persona,
        text: String::new(),
        len: 0,
        phi: Vec::new(),
        med: Vec::new(),
    };
    match kind {
        LetterKind::Discharge => {
            b.template(DISCHARGE_HEADER);
            b.paragraph(Some("HISTORY OF PRESENT ILLNESS"), HISTORY, 3, 5);
            b.paragraph(Some("HOSPITAL COURSE"), COURSE, 3, 5);
            b.paragraph(Some("DISCHARGE MEDICATIONS"), MEDICATIONS, 2, 3);
            b.paragraph(Some("FOLLOW UP"), PLAN, 2, 3);
        }
        LetterKind::Admission => {
            b.template(ADMISSION_HEADER);
            b.paragraph(Some("CHIEF COMPLAINT AND HISTORY"), HISTORY, 4, 6);
            b.paragraph(Some("ASSESSMENT"), COURSE, 2, 4);
            b.paragraph(Some("PLAN"), PLAN, 2, 4);
        }
        LetterKind::Correspondence => {
            b.template(LETTER_HEADER);
            b.paragraph(None, LETTER_OPENINGS, 1, 1);
            b.paragraph(None, HISTORY, 2, 4);
            b.paragraph(None, COURSE, 2, 3);
            b.paragraph(None, PLAN, 2, 3);
            b.paragraph(None, LETTER_CLOSINGS, 1, 2);
            b.push("Sincerely,\n\nDr. ");
            b.slot("DOCFULL");
            b.push("\n");
        }
    }
    (b.text, b.phi, b.med)
}

/// Generates `n_docs` letters; identical `(seed, n_docs)` always yields an
/// identical corpus, and letter `i` depends only on `(seed, i)`.
pub fn generate_fixture_corpus(seed: u64, n_docs: usize) -> Result<Corpus, CorpusError> {
    if n_docs < 1 {
        return Err(CorpusError::InvalidArgument(
            "fixture corpus needs at least one document".into(),
        ));
    }
    let docs = (0..n_docs)
        .map(|i| {
            let mut rng = derive_rng(seed, &format!("fixture/{i}"));
            let kind = match i % 3 {
                0 => LetterKind::Discharge,
                1 => LetterKind::Admission,
                _ => LetterKind::Correspondence,
            };
            let (text, phi, med) = build_letter(&mut rng, kind);
            AnnotatedDocument::new(&format!("letter-{:04}", i + 1), &text, phi, Some(med))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Corpus::new(format!("fixture-{seed}-{n_docs}"), docs)
}
